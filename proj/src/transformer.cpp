#include "peftlab/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace peftlab {

namespace {

// Token embeddings must stay visible next to the unit-scale sinusoidal
// encoder positions.
constexpr double kEmbedStd = 0.3;
constexpr double kPositionStd = 0.02;

std::string role_suffix(Role role) {
  switch (role) {
    case Role::q: return "q_proj";
    case Role::k: return "k_proj";
    case Role::v: return "v_proj";
    case Role::o: return "out_proj";
    case Role::fc1: return "fc1";
    case Role::fc2: return "fc2";
  }
  return "?";
}

std::size_t attention_params(std::size_t d) { return 4 * d * d + 3 * d; }  // k has no bias
std::size_t ffn_params(std::size_t d, std::size_t f) { return 2 * d * f + f + d; }

}  // namespace

std::string_view to_string(ModuleGroup group) {
  switch (group) {
    case ModuleGroup::EncSam: return "Enc-SAM";
    case ModuleGroup::EncFfm: return "Enc-FFM";
    case ModuleGroup::DecSam: return "Dec-SAM";
    case ModuleGroup::DecCam: return "Dec-CAM";
    case ModuleGroup::DecFfm: return "Dec-FFM";
  }
  return "?";
}

std::string_view to_string(Role role) {
  switch (role) {
    case Role::q: return "q";
    case Role::k: return "k";
    case Role::v: return "v";
    case Role::o: return "o";
    case Role::fc1: return "fc1";
    case Role::fc2: return "fc2";
  }
  return "?";
}

ModuleGroup parse_group(std::string_view name) {
  for (ModuleGroup g : kAllGroups) {
    if (to_string(g) == name) return g;
  }
  throw ValidationError("unknown module group '" + std::string(name) + "'");
}

Role parse_role(std::string_view name) {
  for (Role r : kAllRoles) {
    if (to_string(r) == name) return r;
  }
  throw ValidationError("unknown role '" + std::string(name) + "'");
}

bool is_ffm(ModuleGroup group) { return group == ModuleGroup::EncFfm || group == ModuleGroup::DecFfm; }
bool is_encoder(ModuleGroup group) {
  return group == ModuleGroup::EncSam || group == ModuleGroup::EncFfm;
}

// ---------------------------------------------------------------------------
// ArchSpec

ArchSpec ArchSpec::toy_small() { return ArchSpec{}; }

ArchSpec ArchSpec::whisper_medium_dims() {
  ArchSpec a;
  a.name = "whisper-medium-dims";
  a.d_model = 1024;
  a.n_enc_layers = 24;
  a.n_dec_layers = 24;
  a.n_heads = 16;
  a.d_ffn = 4096;
  a.vocab_size = 51865;
  a.max_src_len = 1500;
  a.max_tgt_len = 448;
  a.frontend_mels = 80;
  return a;
}

ArchSpec ArchSpec::preset(std::string_view name) {
  if (name == "toy-small") return toy_small();
  if (name == "whisper-medium-dims") return whisper_medium_dims();
  throw ValidationError("unknown architecture preset '" + std::string(name) +
                        "' (expected toy-small or whisper-medium-dims)");
}

void ArchSpec::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw ValidationError(std::string("arch.") + field + " must be positive");
  };
  positive(d_model, "d_model");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(n_heads, "n_heads");
  positive(d_ffn, "d_ffn");
  positive(vocab_size, "vocab_size");
  positive(max_src_len, "max_src_len");
  positive(max_tgt_len, "max_tgt_len");
  if (frontend_mels < 0) throw ValidationError("arch.frontend_mels must be non-negative");
  if (d_model % n_heads != 0) throw ValidationError("arch.d_model must be divisible by arch.n_heads");
  if (vocab_size <= tokens::kFirstPayload) {
    throw ValidationError("arch.vocab_size must exceed the special-token range");
  }
}

std::vector<double> ArchSpec::to_vector() const {
  return {static_cast<double>(d_model),     static_cast<double>(n_enc_layers),
          static_cast<double>(n_dec_layers), static_cast<double>(n_heads),
          static_cast<double>(d_ffn),        static_cast<double>(vocab_size),
          static_cast<double>(max_src_len),  static_cast<double>(max_tgt_len),
          static_cast<double>(frontend_mels)};
}

ArchSpec ArchSpec::from_vector(std::span<const double> v) {
  if (v.size() != 9) throw ValidationError("arch record must hold 9 values");
  ArchSpec a;
  a.d_model = static_cast<int>(v[0]);
  a.n_enc_layers = static_cast<int>(v[1]);
  a.n_dec_layers = static_cast<int>(v[2]);
  a.n_heads = static_cast<int>(v[3]);
  a.d_ffn = static_cast<int>(v[4]);
  a.vocab_size = static_cast<int>(v[5]);
  a.max_src_len = static_cast<int>(v[6]);
  a.max_tgt_len = static_cast<int>(v[7]);
  a.frontend_mels = static_cast<int>(v[8]);
  a.name = (a == toy_small()) ? "toy-small" : (a == whisper_medium_dims()) ? "whisper-medium-dims" : "custom";
  return a;
}

std::uint64_t ArchSpec::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (double field : to_vector()) {
    auto v = static_cast<std::uint32_t>(field);
    for (int b = 0; b < 4; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

bool ArchSpec::operator==(const ArchSpec& other) const { return to_vector() == other.to_vector(); }

// ---------------------------------------------------------------------------
// Sites and counting

std::string WeightSite::name() const {
  std::string prefix = (is_encoder(group) ? "encoder.layers." : "decoder.layers.") + std::to_string(layer) + ".";
  switch (group) {
    case ModuleGroup::EncSam:
    case ModuleGroup::DecSam: return prefix + "self_attn." + role_suffix(role);
    case ModuleGroup::DecCam: return prefix + "encoder_attn." + role_suffix(role);
    case ModuleGroup::EncFfm:
    case ModuleGroup::DecFfm: return prefix + role_suffix(role);
  }
  return prefix;
}

std::vector<WeightSite> make_sites(const ArchSpec& arch) {
  arch.validate();
  const auto d = static_cast<std::size_t>(arch.d_model);
  const auto f = static_cast<std::size_t>(arch.d_ffn);
  std::vector<WeightSite> sites;
  sites.reserve(static_cast<std::size_t>(arch.n_enc_layers * 6 + arch.n_dec_layers * 10));
  auto push = [&](int layer, ModuleGroup group, Role role) {
    WeightSite s;
    s.index = sites.size();
    s.layer = layer;
    s.group = group;
    s.role = role;
    s.out_dim = role == Role::fc1 ? f : d;
    s.in_dim = role == Role::fc2 ? f : d;
    s.has_bias = role != Role::k;
    sites.push_back(s);
  };
  for (int l = 0; l < arch.n_enc_layers; ++l) {
    for (Role r : {Role::q, Role::k, Role::v, Role::o}) push(l, ModuleGroup::EncSam, r);
    for (Role r : {Role::fc1, Role::fc2}) push(l, ModuleGroup::EncFfm, r);
  }
  for (int l = 0; l < arch.n_dec_layers; ++l) {
    for (Role r : {Role::q, Role::k, Role::v, Role::o}) push(l, ModuleGroup::DecSam, r);
    for (Role r : {Role::q, Role::k, Role::v, Role::o}) push(l, ModuleGroup::DecCam, r);
    for (Role r : {Role::fc1, Role::fc2}) push(l, ModuleGroup::DecFfm, r);
  }
  return sites;
}

std::vector<WeightSite> enumerate_sites(std::span<const WeightSite> sites, RoleSet roles,
                                        GroupSet groups) {
  std::vector<WeightSite> out;
  for (const WeightSite& s : sites) {
    if (roles.contains(s.role) && groups.contains(s.group)) out.push_back(s);
  }
  return out;
}

std::size_t base_parameter_count(const ArchSpec& arch) {
  arch.validate();
  const auto d = static_cast<std::size_t>(arch.d_model);
  const auto f = static_cast<std::size_t>(arch.d_ffn);
  const auto v = static_cast<std::size_t>(arch.vocab_size);
  const auto mels = static_cast<std::size_t>(arch.frontend_mels);
  std::size_t total = 0;
  if (mels > 0) {
    total += 3 * mels * d + d + 3 * d * d + d;
  } else {
    total += v * d;
  }
  const std::size_t enc_layer = attention_params(d) + ffn_params(d, f) + 2 * 2 * d;
  const std::size_t dec_layer = 2 * attention_params(d) + ffn_params(d, f) + 3 * 2 * d;
  total += static_cast<std::size_t>(arch.n_enc_layers) * enc_layer + 2 * d;
  total += v * d + static_cast<std::size_t>(arch.max_tgt_len) * d;
  total += static_cast<std::size_t>(arch.n_dec_layers) * dec_layer + 2 * d;
  return total;
}

std::size_t bias_parameter_count(const ArchSpec& arch) {
  arch.validate();
  const auto d = static_cast<std::size_t>(arch.d_model);
  const auto f = static_cast<std::size_t>(arch.d_ffn);
  const std::size_t enc_layer = 3 * d + (f + d) + 2 * d;
  const std::size_t dec_layer = 2 * 3 * d + (f + d) + 3 * d;
  std::size_t total = static_cast<std::size_t>(arch.n_enc_layers) * enc_layer +
                      static_cast<std::size_t>(arch.n_dec_layers) * dec_layer + 2 * d;
  if (arch.frontend_mels > 0) total += 2 * d;
  return total;
}

// ---------------------------------------------------------------------------
// Model

const Tensor* ForwardOverrides::param(std::size_t id) const {
  if (id < params.size() && params[id].defined()) return &params[id];
  return nullptr;
}

const Tensor* ForwardOverrides::output_scale(std::size_t site) const {
  if (site < site_output_scale.size() && site_output_scale[site].defined()) {
    return &site_output_scale[site];
  }
  return nullptr;
}

std::optional<std::size_t> Model::find_param(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

std::vector<std::size_t> Model::bias_param_ids() const {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& n = params_[i].name;
    if (n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0) ids.push_back(i);
  }
  return ids;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

void Model::set_requires_grad(bool flag) {
  for (auto& p : params_) p.tensor.set_requires_grad(flag);
}

Model Model::clone() const {
  Model copy = *this;
  for (auto& p : copy.params_) p.tensor = p.tensor.clone();
  return copy;
}

Tensor sinusoidal_positions(std::size_t length, std::size_t channels) {
  const std::size_t half = channels / 2;
  Tensor table = Tensor::zeros({length, channels});
  const double increment = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(t) * std::exp(-increment * static_cast<double>(i));
      table.at(t, i) = std::sin(angle);
      table.at(t, half + i) = std::cos(angle);
    }
  }
  return table;
}

Model build_model(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  if (arch.frontend_mels > 0) {
    throw ValidationError("arch '" + arch.name +
                          "' uses the audio front-end stub, which is available for counting only");
  }
  Model m;
  m.arch_ = arch;
  m.sites_ = make_sites(arch);
  m.site_ids_.resize(m.sites_.size());
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(arch.d_model);
  const auto v = static_cast<std::size_t>(arch.vocab_size);

  auto add = [&](std::string name, Tensor t) {
    m.params_.push_back({std::move(name), std::move(t)});
    return m.params_.size() - 1;
  };
  auto norm = [&](const std::string& prefix) {
    LayerNormIds ids;
    ids.gain = add(prefix + ".weight", Tensor::full({d}, 1.0));
    ids.bias = add(prefix + ".bias", Tensor::zeros({d}));
    return ids;
  };
  std::size_t next_site = 0;
  auto site = [&]() {
    const WeightSite& s = m.sites_[next_site];
    SiteParamIds ids;
    ids.weight = add(s.name() + ".weight", Tensor::normal({s.out_dim, s.in_dim}, 1.0 / std::sqrt(static_cast<double>(s.in_dim)), rng));
    if (s.has_bias) ids.bias = add(s.name() + ".bias", Tensor::zeros({s.out_dim}));
    m.site_ids_[next_site] = ids;
    return next_site++;
  };

  m.layout_.enc_embed = add("encoder.embed_tokens", Tensor::normal({v, d}, kEmbedStd, rng));
  for (int l = 0; l < arch.n_enc_layers; ++l) {
    const std::string prefix = "encoder.layers." + std::to_string(l);
    Model::EncoderLayer layer;
    layer.attn_norm = norm(prefix + ".self_attn_layer_norm");
    for (auto& s : layer.attn_sites) s = site();
    layer.ffn_norm = norm(prefix + ".final_layer_norm");
    for (auto& s : layer.ffn_sites) s = site();
    m.layout_.encoder.push_back(layer);
  }
  m.layout_.enc_final = norm("encoder.layer_norm");

  m.layout_.dec_embed = add("decoder.embed_tokens", Tensor::normal({v, d}, kEmbedStd, rng));
  m.layout_.dec_positions = add(
      "decoder.embed_positions",
      Tensor::normal({static_cast<std::size_t>(arch.max_tgt_len), d}, kPositionStd, rng));
  for (int l = 0; l < arch.n_dec_layers; ++l) {
    const std::string prefix = "decoder.layers." + std::to_string(l);
    Model::DecoderLayer layer;
    layer.self_norm = norm(prefix + ".self_attn_layer_norm");
    for (auto& s : layer.self_sites) s = site();
    layer.cross_norm = norm(prefix + ".encoder_attn_layer_norm");
    for (auto& s : layer.cross_sites) s = site();
    layer.ffn_norm = norm(prefix + ".final_layer_norm");
    for (auto& s : layer.ffn_sites) s = site();
    m.layout_.decoder.push_back(layer);
  }
  m.layout_.dec_final = norm("decoder.layer_norm");
  m.enc_positions_ = sinusoidal_positions(static_cast<std::size_t>(arch.max_src_len), d);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

class Pass {
 public:
  Pass(Tape& tape, const Model& model, const ForwardOverrides* overrides)
      : tape_(tape), model_(model), overrides_(overrides) {}

  const Tensor& param(std::size_t id) const {
    if (overrides_) {
      if (const Tensor* t = overrides_->param(id)) return *t;
    }
    return model_.param(id);
  }

  Tensor norm(const Tensor& x, const LayerNormIds& ids) const {
    return ops::layer_norm(tape_, x, param(ids.gain), param(ids.bias));
  }

  Tensor project(const Tensor& x, std::size_t site) const {
    const SiteParamIds& ids = model_.site_params(site);
    Tensor bias = ids.bias ? param(*ids.bias) : Tensor{};
    Tensor y = ops::linear(tape_, x, param(ids.weight), bias);
    if (overrides_) {
      if (const Tensor* s = overrides_->output_scale(site)) y = ops::mul_rowvec(tape_, y, *s);
    }
    return y;
  }

  Tensor attend(const Tensor& x, const Tensor& memory, const std::array<std::size_t, 4>& sites,
                bool causal, std::span<const std::uint8_t> key_valid) const {
    const Tensor q = project(x, sites[0]);
    const Tensor k = project(memory, sites[1]);
    const Tensor v = project(memory, sites[2]);
    const Tensor a = ops::attention(tape_, q, k, v, static_cast<std::size_t>(model_.arch().n_heads),
                                    causal, key_valid);
    return project(a, sites[3]);
  }

  Tensor feed_forward(const Tensor& x, const std::array<std::size_t, 2>& sites) const {
    return project(ops::gelu(tape_, project(x, sites[0])), sites[1]);
  }

  Tape& tape() const { return tape_; }

 private:
  Tape& tape_;
  const Model& model_;
  const ForwardOverrides* overrides_;
};

void check_tokens(std::span<const int> ids, int vocab, int max_len, const char* what) {
  if (ids.empty()) throw std::invalid_argument(std::string(what) + " sequence is empty");
  if (ids.size() > static_cast<std::size_t>(max_len)) {
    throw std::out_of_range(std::string(what) + " length " + std::to_string(ids.size()) +
                            " exceeds maximum " + std::to_string(max_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range(std::string(what) + " token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
}

std::vector<std::uint8_t> resolve_valid(std::span<const int> src, std::span<const std::uint8_t> src_valid) {
  if (!src_valid.empty()) {
    if (src_valid.size() != src.size()) throw std::invalid_argument("source mask length mismatch");
    return {src_valid.begin(), src_valid.end()};
  }
  std::vector<std::uint8_t> valid(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) valid[i] = src[i] != tokens::kPad;
  return valid;
}

}  // namespace

Tensor encode(Tape& tape, const Model& model, std::span<const int> src,
              const ForwardOverrides* overrides, std::span<const std::uint8_t> src_valid) {
  const ArchSpec& arch = model.arch();
  check_tokens(src, arch.vocab_size, arch.max_src_len, "source");
  const std::vector<std::uint8_t> valid = resolve_valid(src, src_valid);
  const Pass pass(tape, model, overrides);
  const Model::Layout& layout = model.layout();

  Tensor x = ops::embedding(tape, pass.param(layout.enc_embed), src);
  Tape constants(false);
  x = ops::add(tape, x, ops::slice_rows(constants, model.encoder_positions(), 0, src.size()));
  for (const auto& layer : layout.encoder) {
    const Tensor h = pass.norm(x, layer.attn_norm);
    x = ops::add(tape, x, pass.attend(h, h, layer.attn_sites, false, valid));
    x = ops::add(tape, x, pass.feed_forward(pass.norm(x, layer.ffn_norm), layer.ffn_sites));
  }
  return pass.norm(x, layout.enc_final);
}

Tensor decode(Tape& tape, const Model& model, const Tensor& memory, std::span<const int> tgt,
              const ForwardOverrides* overrides, std::span<const std::uint8_t> src_valid) {
  const ArchSpec& arch = model.arch();
  check_tokens(tgt, arch.vocab_size, arch.max_tgt_len, "target");
  std::vector<std::uint8_t> valid;
  if (!src_valid.empty()) {
    if (src_valid.size() != memory.rows()) throw std::invalid_argument("source mask length mismatch");
    valid.assign(src_valid.begin(), src_valid.end());
  }
  const Pass pass(tape, model, overrides);
  const Model::Layout& layout = model.layout();

  const Tensor& embed = pass.param(layout.dec_embed);
  Tensor y = ops::embedding(tape, embed, tgt);
  y = ops::add(tape, y, ops::slice_rows(tape, pass.param(layout.dec_positions), 0, tgt.size()));
  for (const auto& layer : layout.decoder) {
    const Tensor h = pass.norm(y, layer.self_norm);
    y = ops::add(tape, y, pass.attend(h, h, layer.self_sites, true, {}));
    y = ops::add(tape, y, pass.attend(pass.norm(y, layer.cross_norm), memory, layer.cross_sites, false, valid));
    y = ops::add(tape, y, pass.feed_forward(pass.norm(y, layer.ffn_norm), layer.ffn_sites));
  }
  y = pass.norm(y, layout.dec_final);
  return ops::linear(tape, y, embed, Tensor{});
}

Tensor forward(Tape& tape, const Model& model, std::span<const int> src, std::span<const int> tgt,
               const ForwardOverrides* overrides, std::span<const std::uint8_t> src_valid) {
  const std::vector<std::uint8_t> valid = resolve_valid(src, src_valid);
  const Tensor memory = encode(tape, model, src, overrides, valid);
  return decode(tape, model, memory, tgt, overrides, valid);
}

std::vector<int> greedy_decode(const Model& model, std::span<const int> src, std::size_t max_len,
                               const ForwardOverrides* overrides) {
  if (max_len == 0) throw std::invalid_argument("greedy_decode: max_len must be at least 1");
  Tape tape(false);
  const std::vector<std::uint8_t> valid = resolve_valid(src, {});
  const Tensor memory = encode(tape, model, src, overrides, valid);
  std::vector<int> seq{tokens::kBos};
  const auto limit = std::min(max_len, static_cast<std::size_t>(model.arch().max_tgt_len) - 1);
  while (seq.size() - 1 < limit) {
    const Tensor logits = decode(tape, model, memory, seq, overrides, valid);
    const std::size_t v = logits.cols();
    const auto last = logits.data().subspan((logits.rows() - 1) * v, v);
    const auto best = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (best == tokens::kEos) break;
    seq.push_back(best);
  }
  return {seq.begin() + 1, seq.end()};
}

}  // namespace peftlab
