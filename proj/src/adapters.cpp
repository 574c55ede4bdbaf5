#include "peftlab/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <unordered_map>

namespace peftlab {

namespace {

// Random factors start with roughly unit-norm rows (A) and columns (B),
// the scale at which the orthogonality targets hold.
double row_std(std::size_t cols) { return 1.0 / std::sqrt(static_cast<double>(cols)); }

std::vector<WeightSite> targeted_sites(const AdapterSpec& spec, const ArchSpec& arch) {
  return enumerate_sites(make_sites(arch), spec.roles());
}

void copy_values(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("copy: " + shape_to_string(src.shape()) + " into " + shape_to_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

std::vector<Tensor> sized_slots(std::size_t n) { return std::vector<Tensor>(n); }

}  // namespace

// ---------------------------------------------------------------------------
// Names and specs

std::string_view to_string(Method method) {
  switch (method) {
    case Method::lora: return "lora";
    case Method::alpha_lora: return "alpha_lora";
    case Method::adalora: return "adalora";
    case Method::s2lora: return "s2lora";
    case Method::bitfit: return "bitfit";
    case Method::ia3: return "ia3";
    case Method::glora: return "glora";
    case Method::full_ft: return "full_ft";
  }
  return "?";
}

std::string method_names() {
  std::string out;
  for (Method m : kAllMethods) {
    if (!out.empty()) out += ", ";
    out += to_string(m);
  }
  return out;
}

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown method '" + std::string(name) + "'; valid methods: " + method_names());
}

std::string_view to_string(FfmSharing sharing) {
  return sharing == FfmSharing::transpose_tied ? "transpose_tied" : "per_shape";
}

FfmSharing parse_ffm_sharing(std::string_view name) {
  if (name == "transpose_tied") return FfmSharing::transpose_tied;
  if (name == "per_shape") return FfmSharing::per_shape;
  throw ValidationError("unknown ffm sharing '" + std::string(name) +
                        "'; valid values: transpose_tied, per_shape");
}

RoleSet default_roles(Method method) {
  switch (method) {
    case Method::lora:
    case Method::alpha_lora:
    case Method::adalora:
    case Method::glora: return RoleSet{Role::q, Role::v};
    case Method::s2lora: return kAllRoleSet;
    case Method::ia3: return RoleSet{Role::k, Role::v, Role::fc2};
    case Method::bitfit:
    case Method::full_ft: return RoleSet{};
  }
  return RoleSet{};
}

AdapterSpec AdapterSpec::for_method(Method method, int rank) {
  AdapterSpec spec;
  spec.method = method;
  spec.rank = rank;
  spec.target_rank = rank;
  spec.initial_rank = rank == 32 ? 48 : 12;
  return spec;
}

RoleSet AdapterSpec::roles() const {
  if (method == Method::ia3 || method == Method::bitfit || method == Method::full_ft) {
    return default_roles(method);
  }
  return target_roles.value_or(default_roles(method));
}

int AdapterSpec::state_rank() const { return method == Method::adalora ? initial_rank : rank; }

void AdapterSpec::validate(const ArchSpec& arch) const {
  arch.validate();
  if (alpha1 < 0.0) throw ValidationError("alpha1 must be non-negative");
  if (alpha2 < 0.0) throw ValidationError("alpha2 must be non-negative");
  if (!(epsilon_nominal > 0.0)) throw ValidationError("epsilon_nominal must be positive");
  const bool low_rank = method == Method::lora || method == Method::alpha_lora ||
                        method == Method::s2lora || method == Method::glora ||
                        method == Method::adalora;
  if (!low_rank) return;
  if (roles().empty()) throw ValidationError("target_roles must not be empty");
  if (method == Method::adalora) {
    if (target_rank < 1) throw ValidationError("adalora target rank must be at least 1");
    if (initial_rank < target_rank) throw ValidationError("adalora initial rank must be >= target rank");
  } else if (rank < 1) {
    throw ValidationError("rank must be at least 1");
  }
  const auto r = static_cast<std::size_t>(state_rank());
  for (const WeightSite& s : targeted_sites(*this, arch)) {
    if (r >= std::min(s.in_dim, s.out_dim)) {
      throw ValidationError("rank " + std::to_string(r) + " is not below min(d1, d2) = " +
                            std::to_string(std::min(s.in_dim, s.out_dim)) + " at site " + s.name());
    }
  }
}

std::vector<double> AdapterSpec::to_vector() const {
  return {static_cast<double>(method),
          static_cast<double>(rank),
          target_roles ? static_cast<double>(target_roles->bits()) : -1.0,
          alpha1,
          alpha2,
          epsilon_nominal,
          static_cast<double>(initial_rank),
          static_cast<double>(target_rank),
          orth_on ? 1.0 : 0.0,
          alloc_on ? 1.0 : 0.0,
          static_cast<double>(ffm_sharing),
          static_cast<double>(glora_families.bits())};
}

AdapterSpec AdapterSpec::from_vector(std::span<const double> v) {
  if (v.size() != 12) throw ValidationError("adapter spec record must hold 12 values");
  AdapterSpec s;
  const auto method_index = static_cast<std::size_t>(v[0]);
  if (method_index >= kAllMethods.size()) throw ValidationError("adapter spec record: bad method");
  s.method = kAllMethods[method_index];
  s.rank = static_cast<int>(v[1]);
  if (v[2] >= 0.0) {
    RoleSet roles;
    const auto bits = static_cast<std::uint32_t>(v[2]);
    for (Role r : kAllRoles) {
      if (bits & (1U << static_cast<unsigned>(r))) roles.insert(r);
    }
    s.target_roles = roles;
  }
  s.alpha1 = v[3];
  s.alpha2 = v[4];
  s.epsilon_nominal = v[5];
  s.initial_rank = static_cast<int>(v[6]);
  s.target_rank = static_cast<int>(v[7]);
  s.orth_on = v[8] != 0.0;
  s.alloc_on = v[9] != 0.0;
  s.ffm_sharing = v[10] == 0.0 ? FfmSharing::transpose_tied : FfmSharing::per_shape;
  GloraFamilies fam;
  const auto fbits = static_cast<std::uint32_t>(v[11]);
  for (auto f : {GloraFamily::A, GloraFamily::B, GloraFamily::C, GloraFamily::D, GloraFamily::E}) {
    if (fbits & (1U << static_cast<unsigned>(f))) fam.insert(f);
  }
  s.glora_families = fam;
  return s;
}

// ---------------------------------------------------------------------------
// Counting

TrainableCount count_trainable(const AdapterSpec& spec, const ArchSpec& arch) {
  spec.validate(arch);
  const std::size_t total = base_parameter_count(arch);
  const auto r = static_cast<std::size_t>(spec.state_rank());
  std::size_t count = 0;
  const std::vector<WeightSite> sites = targeted_sites(spec, arch);
  switch (spec.method) {
    case Method::lora:
      for (const auto& s : sites) count += r * (s.in_dim + s.out_dim);
      break;
    case Method::alpha_lora:
      for (const auto& s : sites) count += r * (s.in_dim + s.out_dim) + 1;
      break;
    case Method::adalora:
      for (const auto& s : sites) count += r * (s.in_dim + s.out_dim) + r;
      break;
    case Method::s2lora: {
      SharedBasisStore probe(spec.ffm_sharing);
      std::set<BasisKey> keys;
      for (const auto& s : sites) keys.insert(probe.resolve(s.group, s.role, s.out_dim, s.in_dim).key);
      for (const auto& k : keys) count += r * (k.rows + k.cols);
      count += r * sites.size();
      break;
    }
    case Method::bitfit:
      count = bias_parameter_count(arch);
      break;
    case Method::ia3:
      for (const auto& s : sites) count += s.out_dim;
      break;
    case Method::glora: {
      const GloraFamilies fam = spec.glora_families;
      for (const auto& s : sites) {
        if (fam.contains(GloraFamily::A)) count += 2 * s.in_dim * r;
        if (fam.contains(GloraFamily::B)) count += s.out_dim * r + r * s.in_dim;
        if (!s.has_bias) continue;
        if (fam.contains(GloraFamily::C)) count += s.in_dim;
        if (fam.contains(GloraFamily::D)) count += 1;
        if (fam.contains(GloraFamily::E)) count += s.out_dim;
      }
      break;
    }
    case Method::full_ft:
      count = total;
      break;
  }
  return {count, static_cast<double>(count) / static_cast<double>(total)};
}

// ---------------------------------------------------------------------------
// Deltas

Tensor delta_lora(Tape& tape, const LoRAState& state) { return ops::matmul(tape, state.B, state.A); }

Tensor delta_alpha_lora(Tape& tape, const LoRAState& state) {
  return ops::mul_scalar(tape, ops::matmul(tape, state.B, state.A), state.alpha);
}

std::size_t AdaLoRAState::active_rank() const {
  std::size_t n = 0;
  for (double m : mask.data()) n += m != 0.0;
  return n;
}

Tensor delta_adalora(Tape& tape, const AdaLoRAState& state) {
  if (state.mask.size() != state.lambda.size()) {
    throw DimensionError("delta_adalora: mask length " + std::to_string(state.mask.size()) +
                         " differs from lambda length " + std::to_string(state.lambda.size()));
  }
  const Tensor coeff = ops::mul(tape, state.lambda, state.mask);
  return ops::matmul(tape, ops::scale_cols(tape, state.B, coeff), state.A);
}

std::string BasisKey::id() const {
  return std::string(to_string(group)) + "@" + std::to_string(rows) + "x" + std::to_string(cols);
}

BasisRef SharedBasisStore::resolve(ModuleGroup group, Role role, std::size_t out_dim,
                                   std::size_t in_dim) const {
  if (sharing_ == FfmSharing::transpose_tied && role == Role::fc2) {
    return {BasisKey{group, in_dim, out_dim}, true};
  }
  return {BasisKey{group, out_dim, in_dim}, false};
}

SharedPair& SharedBasisStore::insert(const BasisKey& key, SharedPair pair) {
  return pairs_.insert_or_assign(key, std::move(pair)).first->second;
}

const SharedPair* SharedBasisStore::find(const BasisKey& key) const {
  auto it = pairs_.find(key);
  return it == pairs_.end() ? nullptr : &it->second;
}

SharedPair* SharedBasisStore::find(const BasisKey& key) {
  auto it = pairs_.find(key);
  return it == pairs_.end() ? nullptr : &it->second;
}

std::size_t SharedBasisStore::pair_count(ModuleGroup group) const {
  return static_cast<std::size_t>(
      std::count_if(pairs_.begin(), pairs_.end(), [group](const auto& kv) { return kv.first.group == group; }));
}

Tensor delta_s2lora(Tape& tape, const SharedBasisStore& store, const S2State& state) {
  const SharedPair* pair = store.find(state.basis.key);
  if (!pair) throw WiringError("delta_s2lora: no shared pair for key " + state.basis.key.id());
  if (state.basis.transposed) {
    const Tensor left = ops::scale_cols(tape, ops::transpose(tape, pair->A), state.s);
    return ops::matmul(tape, left, ops::transpose(tape, pair->B));
  }
  return ops::matmul(tape, ops::scale_cols(tape, pair->B, state.s), pair->A);
}

EffectiveWeights glora_effective(Tape& tape, const GLoRAState& st, const Tensor& weight,
                                 const Tensor& bias) {
  EffectiveWeights out;
  const Tensor wa = ops::matmul(tape, ops::matmul(tape, weight, st.a_down), st.a_up);
  out.weight = ops::add(tape, ops::add(tape, weight, wa), ops::matmul(tape, st.b_down, st.b_up));
  if (bias.defined() && st.c.defined()) {
    const std::size_t d1 = weight.cols();
    const std::size_t d2 = weight.rows();
    const Tensor wc = ops::reshape(tape, ops::matmul(tape, weight, ops::reshape(tape, st.c, {d1, 1})), {d2});
    Tensor b = ops::add(tape, bias, wc);
    b = ops::add(tape, b, ops::mul_scalar(tape, bias, st.d));
    out.bias = ops::add(tape, b, st.e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adapter base

Adapter::Adapter(AdapterSpec spec, ArchSpec arch) : spec_(std::move(spec)), arch_(std::move(arch)) {
  spec_.validate(arch_);
}

void Adapter::bind(Model& base) {
  if (!(base.arch() == arch_)) {
    throw ValidationError("adapter architecture does not match the model it is attached to");
  }
}

void Adapter::load_state(std::span<const NamedTensor> arrays) {
  std::unordered_map<std::string_view, const Tensor*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a.tensor;
  for (NamedTensor& slot : state()) {
    auto it = by_name.find(slot.name);
    if (it == by_name.end()) throw ValidationError("adapter state is missing array " + slot.name);
    copy_values(slot.tensor, *it->second);
  }
}

std::size_t Adapter::trainable_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.tensor.size();
  return n;
}

std::string Adapter::prefix() const { return "adapter/" + std::string(to_string(spec_.method)) + "/"; }

// ---------------------------------------------------------------------------
// LoRA / alpha-LoRA

LoRAAdapter::LoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed)
    : Adapter(spec, arch), sites_(targeted_sites(spec, arch)) {
  std::mt19937_64 rng(seed);
  const auto r = static_cast<std::size_t>(spec.rank);
  const bool scalar = spec.method == Method::alpha_lora;
  for (const auto& s : sites_) {
    LoRAState st;
    if (scalar) {
      st.B = Tensor::normal({s.out_dim, r}, row_std(s.out_dim), rng, true);
      st.A = Tensor::normal({r, s.in_dim}, row_std(s.in_dim), rng, true);
      st.alpha = Tensor::scalar(0.0, true);
    } else {
      st.B = Tensor::zeros({s.out_dim, r}, true);
      st.A = Tensor::normal({r, s.in_dim}, row_std(s.in_dim), rng, true);
    }
    states_.push_back(std::move(st));
  }
}

Tensor LoRAAdapter::delta(Tape& tape, std::size_t i) const {
  return method() == Method::alpha_lora ? delta_alpha_lora(tape, states_[i]) : delta_lora(tape, states_[i]);
}

ForwardOverrides LoRAAdapter::overrides(Tape& tape, const Model& base) const {
  ForwardOverrides ov;
  ov.params = sized_slots(base.parameters().size());
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const std::size_t id = base.site_params(sites_[i].index).weight;
    ov.params[id] = ops::add(tape, base.param(id), delta(tape, i));
  }
  return ov;
}

std::vector<NamedTensor> LoRAAdapter::trainable() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const std::string p = prefix() + sites_[i].name() + "/";
    out.push_back({p + "B", states_[i].B});
    out.push_back({p + "A", states_[i].A});
    if (states_[i].alpha.defined()) out.push_back({p + "alpha", states_[i].alpha});
  }
  return out;
}

void LoRAAdapter::merge_into(Model& model) const {
  Tape tape(false);
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    Tensor& w = model.param(model.site_params(sites_[i].index).weight);
    copy_values(w, ops::add(tape, w, delta(tape, i)));
  }
}

// ---------------------------------------------------------------------------
// AdaLoRA

AdaLoRAAdapter::AdaLoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed)
    : Adapter(spec, arch), sites_(targeted_sites(spec, arch)) {
  std::mt19937_64 rng(seed);
  const auto r = static_cast<std::size_t>(spec.initial_rank);
  for (const auto& s : sites_) {
    AdaLoRAState st;
    st.B = Tensor::normal({s.out_dim, r}, row_std(s.out_dim), rng, true);
    st.lambda = Tensor::zeros({r}, true);
    st.A = Tensor::normal({r, s.in_dim}, row_std(s.in_dim), rng, true);
    st.mask = Tensor::full({r}, 1.0);
    states_.push_back(std::move(st));
  }
}

ForwardOverrides AdaLoRAAdapter::overrides(Tape& tape, const Model& base) const {
  ForwardOverrides ov;
  ov.params = sized_slots(base.parameters().size());
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const std::size_t id = base.site_params(sites_[i].index).weight;
    ov.params[id] = ops::add(tape, base.param(id), delta_adalora(tape, states_[i]));
  }
  return ov;
}

std::vector<NamedTensor> AdaLoRAAdapter::trainable() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const std::string p = prefix() + sites_[i].name() + "/";
    out.push_back({p + "B", states_[i].B});
    out.push_back({p + "lambda", states_[i].lambda});
    out.push_back({p + "A", states_[i].A});
  }
  return out;
}

std::vector<NamedTensor> AdaLoRAAdapter::state() const {
  std::vector<NamedTensor> out = trainable();
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    out.push_back({prefix() + sites_[i].name() + "/mask", states_[i].mask});
  }
  return out;
}

void AdaLoRAAdapter::merge_into(Model& model) const {
  Tape tape(false);
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    Tensor& w = model.param(model.site_params(sites_[i].index).weight);
    copy_values(w, ops::add(tape, w, delta_adalora(tape, states_[i])));
  }
}

std::size_t AdaLoRAAdapter::total_active_rank() const {
  std::size_t n = 0;
  for (const auto& st : states_) n += st.active_rank();
  return n;
}

std::size_t AdaLoRAAdapter::total_triplets() const {
  return states_.size() * static_cast<std::size_t>(spec().initial_rank);
}

// ---------------------------------------------------------------------------
// S2-LoRA

S2LoRAAdapter::S2LoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed)
    : Adapter(spec, arch), sites_(targeted_sites(spec, arch)), store_(spec.ffm_sharing) {
  std::mt19937_64 rng(seed);
  const auto r = static_cast<std::size_t>(spec.rank);
  for (const auto& s : sites_) {
    S2State st;
    st.site = s.index;
    st.basis = store_.resolve(s.group, s.role, s.out_dim, s.in_dim);
    if (!store_.find(st.basis.key)) {
      SharedPair pair;
      pair.B = Tensor::normal({st.basis.key.rows, r}, row_std(st.basis.key.rows), rng, true);
      pair.A = Tensor::normal({r, st.basis.key.cols}, row_std(st.basis.key.cols), rng, true);
      store_.insert(st.basis.key, std::move(pair));
    }
    st.s = Tensor::zeros({r}, true);
    states_.push_back(std::move(st));
  }
}

ForwardOverrides S2LoRAAdapter::overrides(Tape& tape, const Model& base) const {
  ForwardOverrides ov;
  ov.params = sized_slots(base.parameters().size());
  for (const auto& st : states_) {
    const std::size_t id = base.site_params(st.site).weight;
    ov.params[id] = ops::add(tape, base.param(id), delta_s2lora(tape, store_, st));
  }
  return ov;
}

std::vector<NamedTensor> S2LoRAAdapter::trainable() const {
  std::vector<NamedTensor> out;
  for (const auto& [key, pair] : store_.pairs()) {
    out.push_back({prefix() + key.id() + "/B", pair.B});
    out.push_back({prefix() + key.id() + "/A", pair.A});
  }
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    out.push_back({prefix() + sites_[i].name() + "/s", states_[i].s});
  }
  return out;
}

void S2LoRAAdapter::merge_into(Model& model) const {
  Tape tape(false);
  for (const auto& st : states_) {
    Tensor& w = model.param(model.site_params(st.site).weight);
    copy_values(w, ops::add(tape, w, delta_s2lora(tape, store_, st)));
  }
}

// ---------------------------------------------------------------------------
// BitFit

BitFitAdapter::BitFitAdapter(const AdapterSpec& spec, const ArchSpec& arch) : Adapter(spec, arch) {}

void BitFitAdapter::bind(Model& base) {
  Adapter::bind(base);
  param_ids_ = base.bias_param_ids();
  biases_.clear();
  for (std::size_t id : param_ids_) {
    Tensor copy = base.param(id).clone();
    copy.set_requires_grad(true);
    biases_.push_back({prefix() + base.parameters()[id].name, copy});
  }
}

ForwardOverrides BitFitAdapter::overrides(Tape&, const Model& base) const {
  ForwardOverrides ov;
  ov.params = sized_slots(base.parameters().size());
  for (std::size_t i = 0; i < param_ids_.size(); ++i) ov.params[param_ids_[i]] = biases_[i].tensor;
  return ov;
}

std::vector<NamedTensor> BitFitAdapter::trainable() const { return biases_; }

void BitFitAdapter::merge_into(Model& model) const {
  for (std::size_t i = 0; i < param_ids_.size(); ++i) copy_values(model.param(param_ids_[i]), biases_[i].tensor);
}

// ---------------------------------------------------------------------------
// IA3

IA3Adapter::IA3Adapter(const AdapterSpec& spec, const ArchSpec& arch)
    : Adapter(spec, arch), sites_(targeted_sites(spec, arch)) {
  for (const auto& s : sites_) scales_.push_back(Tensor::full({s.out_dim}, 1.0, true));
}

ForwardOverrides IA3Adapter::overrides(Tape&, const Model& base) const {
  ForwardOverrides ov;
  ov.site_output_scale = sized_slots(base.sites().size());
  for (std::size_t i = 0; i < sites_.size(); ++i) ov.site_output_scale[sites_[i].index] = scales_[i];
  return ov;
}

std::vector<NamedTensor> IA3Adapter::trainable() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    out.push_back({prefix() + sites_[i].name() + "/scale", scales_[i]});
  }
  return out;
}

void IA3Adapter::merge_into(Model& model) const {
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const SiteParamIds& ids = model.site_params(sites_[i].index);
    Tensor& w = model.param(ids.weight);
    const auto l = scales_[i].data();
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) w.at(r, c) *= l[r];
    }
    if (ids.bias) {
      Tensor& b = model.param(*ids.bias);
      for (std::size_t r = 0; r < b.size(); ++r) b[r] *= l[r];
    }
  }
}

// ---------------------------------------------------------------------------
// GLoRA

GLoRAAdapter::GLoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed)
    : Adapter(spec, arch), sites_(targeted_sites(spec, arch)) {
  std::mt19937_64 rng(seed);
  const auto r = static_cast<std::size_t>(spec.rank);
  const GloraFamilies fam = spec.glora_families;
  const bool fa = fam.contains(GloraFamily::A);
  const bool fb = fam.contains(GloraFamily::B);
  for (const auto& s : sites_) {
    GLoRAState st;
    st.a_down = Tensor::normal({s.in_dim, r}, row_std(s.in_dim), rng, fa);
    st.a_up = Tensor::zeros({r, s.in_dim}, fa);
    st.b_down = Tensor::zeros({s.out_dim, r}, fb);
    st.b_up = Tensor::normal({r, s.in_dim}, row_std(s.in_dim), rng, fb);
    if (s.has_bias) {
      st.c = Tensor::zeros({s.in_dim}, fam.contains(GloraFamily::C));
      st.d = Tensor::scalar(0.0, fam.contains(GloraFamily::D));
      st.e = Tensor::zeros({s.out_dim}, fam.contains(GloraFamily::E));
    }
    states_.push_back(std::move(st));
  }
}

ForwardOverrides GLoRAAdapter::overrides(Tape& tape, const Model& base) const {
  ForwardOverrides ov;
  ov.params = sized_slots(base.parameters().size());
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const SiteParamIds& ids = base.site_params(sites_[i].index);
    const Tensor bias = ids.bias ? base.param(*ids.bias) : Tensor{};
    EffectiveWeights eff = glora_effective(tape, states_[i], base.param(ids.weight), bias);
    ov.params[ids.weight] = eff.weight;
    if (ids.bias) ov.params[*ids.bias] = eff.bias;
  }
  return ov;
}

std::vector<NamedTensor> GLoRAAdapter::all_fields() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const std::string p = prefix() + sites_[i].name() + "/";
    const GLoRAState& st = states_[i];
    out.push_back({p + "A_down", st.a_down});
    out.push_back({p + "A_up", st.a_up});
    out.push_back({p + "B_down", st.b_down});
    out.push_back({p + "B_up", st.b_up});
    if (st.c.defined()) {
      out.push_back({p + "C", st.c});
      out.push_back({p + "D", st.d});
      out.push_back({p + "E", st.e});
    }
  }
  return out;
}

std::vector<NamedTensor> GLoRAAdapter::trainable() const {
  std::vector<NamedTensor> out;
  for (auto& f : all_fields()) {
    if (f.tensor.requires_grad()) out.push_back(std::move(f));
  }
  return out;
}

std::vector<NamedTensor> GLoRAAdapter::state() const { return all_fields(); }

void GLoRAAdapter::merge_into(Model& model) const {
  Tape tape(false);
  for (std::size_t i = 0; i < sites_.size(); ++i) {
    const SiteParamIds& ids = model.site_params(sites_[i].index);
    const Tensor bias = ids.bias ? model.param(*ids.bias) : Tensor{};
    EffectiveWeights eff = glora_effective(tape, states_[i], model.param(ids.weight), bias);
    copy_values(model.param(ids.weight), eff.weight);
    if (ids.bias) copy_values(model.param(*ids.bias), eff.bias);
  }
}

// ---------------------------------------------------------------------------
// Full fine-tuning

FullFineTune::FullFineTune(const AdapterSpec& spec, const ArchSpec& arch) : Adapter(spec, arch) {}

void FullFineTune::bind(Model& base) {
  Adapter::bind(base);
  base.set_requires_grad(true);
  params_.clear();
  for (const auto& p : base.parameters()) params_.push_back({prefix() + p.name, p.tensor});
}

ForwardOverrides FullFineTune::overrides(Tape&, const Model&) const { return {}; }

std::vector<NamedTensor> FullFineTune::trainable() const { return params_; }

void FullFineTune::merge_into(Model& model) const {
  const std::string p = prefix();
  for (const auto& t : params_) {
    const auto id = model.find_param(std::string_view(t.name).substr(p.size()));
    if (!id) throw ValidationError("merge: base model has no parameter for " + t.name);
    Tensor& dst = model.param(*id);
    if (!dst.same_storage(t.tensor)) copy_values(dst, t.tensor);
  }
}

// ---------------------------------------------------------------------------
// Factory and adapted model

std::unique_ptr<Adapter> make_adapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed) {
  switch (spec.method) {
    case Method::lora:
    case Method::alpha_lora: return std::make_unique<LoRAAdapter>(spec, arch, seed);
    case Method::adalora: return std::make_unique<AdaLoRAAdapter>(spec, arch, seed);
    case Method::s2lora: return std::make_unique<S2LoRAAdapter>(spec, arch, seed);
    case Method::bitfit: return std::make_unique<BitFitAdapter>(spec, arch);
    case Method::ia3: return std::make_unique<IA3Adapter>(spec, arch);
    case Method::glora: return std::make_unique<GLoRAAdapter>(spec, arch, seed);
    case Method::full_ft: return std::make_unique<FullFineTune>(spec, arch);
  }
  throw ValidationError("unsupported method");
}

AdaptedModel::AdaptedModel(Model base, std::unique_ptr<Adapter> adapter)
    : base_(std::move(base)), adapter_(std::move(adapter)) {}

Tensor AdaptedModel::forward(Tape& tape, std::span<const int> src, std::span<const int> tgt) const {
  const ForwardOverrides ov = overrides(tape);
  return peftlab::forward(tape, base_, src, tgt, &ov);
}

std::vector<int> AdaptedModel::greedy_decode(std::span<const int> src, std::size_t max_len) const {
  Tape tape(false);
  const ForwardOverrides ov = overrides(tape);
  return peftlab::greedy_decode(base_, src, max_len, &ov);
}

Model AdaptedModel::merge() const {
  Model merged = base_.clone();
  adapter_->merge_into(merged);
  merged.set_requires_grad(false);
  return merged;
}

std::size_t AdaptedModel::requires_grad_census() const {
  std::vector<Tensor> seen;
  std::size_t n = 0;
  auto visit = [&](const Tensor& t) {
    if (!t.requires_grad()) return;
    for (const auto& s : seen) {
      if (s.same_storage(t)) return;
    }
    seen.push_back(t);
    n += t.size();
  };
  for (const auto& p : base_.parameters()) visit(p.tensor);
  for (const auto& p : adapter_->state()) visit(p.tensor);
  return n;
}

AdaptedModel attach(Model model, const AdapterSpec& spec, std::uint64_t seed) {
  std::unique_ptr<Adapter> adapter = make_adapter(spec, model.arch(), seed);
  model.set_requires_grad(false);
  adapter->bind(model);
  return AdaptedModel(std::move(model), std::move(adapter));
}

}  // namespace peftlab
