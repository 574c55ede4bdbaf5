#include "peftlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <sstream>

#include "json_io.hpp"

namespace peftlab {

using detail::Json;

ConfigError::ConfigError(std::string field, int line, const std::string& message)
    : ValidationError("config" + (line > 0 ? ":" + std::to_string(line) : std::string()) +
                      (field.empty() ? std::string() : ": " + field) + ": " + message),
      field_(std::move(field)),
      line_(line) {}

TrainConfig RunConfig::default_pretrain() {
  TrainConfig t;
  t.learning_rate = 2e-3;
  t.epochs = 4;
  t.batch_size = 4;
  t.grad_accumulation = 2;
  return t;
}

void RunConfig::validate() const {
  arch.validate();
  adapter.validate(arch);
  train.validate();
  pretrain.validate();
  task.validate();
  if (task.max_token() >= arch.vocab_size) {
    throw ValidationError("task vocabulary (" + std::to_string(task.payload_vocab) +
                          " payload tokens) does not fit arch vocab_size " + std::to_string(arch.vocab_size));
  }
  if (task.max_len > arch.max_src_len || task.max_len + 1 > arch.max_tgt_len) {
    throw ValidationError("task.max_len exceeds the architecture's sequence limits");
  }
}

namespace {

int line_at(std::string_view text, std::size_t pos) {
  pos = std::min(pos, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

class Reader {
 public:
  explicit Reader(std::string_view text) : text_(text) {}

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    throw ConfigError(path, locate(path), msg);
  }

  void check_object(const Json& j, const std::string& path) const {
    if (!j.is_object()) fail(path, "expected an object");
  }

  void check_keys(const Json& j, const std::string& path, std::initializer_list<std::string_view> allowed) const {
    for (const auto& [key, value] : j.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
        std::string list;
        for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
        fail(join(path, key), "unknown key (allowed: " + list + ")");
      }
    }
  }

  template <class Int>
  void get_int(const Json& j, const std::string& path, std::string_view key, Int& out) const {
    if (!j.contains(key)) return;
    const Json& v = j.at(std::string(key));
    if (!v.is_number_integer()) fail(join(path, key), "expected an integer");
    if constexpr (std::is_unsigned_v<Int>) {
      if (v.is_number_unsigned()) {
        out = static_cast<Int>(v.get<unsigned long long>());
        return;
      }
      fail(join(path, key), "expected a non-negative integer");
    }
    out = static_cast<Int>(v.get<long long>());
  }

  void get_double(const Json& j, const std::string& path, std::string_view key, double& out) const {
    if (!j.contains(key)) return;
    const Json& v = j.at(std::string(key));
    if (!v.is_number()) fail(join(path, key), "expected a number");
    out = v.get<double>();
  }

  void get_bool(const Json& j, const std::string& path, std::string_view key, bool& out) const {
    if (!j.contains(key)) return;
    const Json& v = j.at(std::string(key));
    if (!v.is_boolean()) fail(join(path, key), "expected true or false");
    out = v.get<bool>();
  }

  bool get_string(const Json& j, const std::string& path, std::string_view key, std::string& out) const {
    if (!j.contains(key)) return false;
    const Json& v = j.at(std::string(key));
    if (!v.is_string()) fail(join(path, key), "expected a string");
    out = v.get<std::string>();
    return true;
  }

  template <class T, class Parse>
  void get_enum(const Json& j, const std::string& path, std::string_view key, T& out, Parse parse) const {
    std::string s;
    if (!get_string(j, path, key, s)) return;
    try {
      out = parse(s);
    } catch (const ValidationError& e) {
      fail(join(path, key), e.what());
    }
  }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

  /// Line of the last component of a dotted path, found by scanning for each
  /// quoted key in turn.
  int locate(const std::string& path) const {
    if (path.empty()) return 0;
    std::size_t pos = 0;
    std::stringstream ss(path);
    std::string comp;
    while (std::getline(ss, comp, '.')) {
      const std::size_t at = text_.find("\"" + comp + "\"", pos);
      if (at == std::string_view::npos) return 0;
      pos = at + 1;
    }
    return line_at(text_, pos);
  }

 private:
  std::string_view text_;
};

void read_arch(const Reader& rd, const Json& j, ArchSpec& arch) {
  const std::string p = "arch";
  rd.check_object(j, p);
  rd.check_keys(j, p, {"preset", "d_model", "n_enc_layers", "n_dec_layers", "n_heads", "d_ffn", "vocab_size",
                       "max_src_len", "max_tgt_len", "frontend_mels"});
  rd.get_enum(j, p, "preset", arch, [](const std::string& s) { return ArchSpec::preset(s); });
  rd.get_int(j, p, "d_model", arch.d_model);
  rd.get_int(j, p, "n_enc_layers", arch.n_enc_layers);
  rd.get_int(j, p, "n_dec_layers", arch.n_dec_layers);
  rd.get_int(j, p, "n_heads", arch.n_heads);
  rd.get_int(j, p, "d_ffn", arch.d_ffn);
  rd.get_int(j, p, "vocab_size", arch.vocab_size);
  rd.get_int(j, p, "max_src_len", arch.max_src_len);
  rd.get_int(j, p, "max_tgt_len", arch.max_tgt_len);
  rd.get_int(j, p, "frontend_mels", arch.frontend_mels);
  try {
    arch.validate();
  } catch (const ValidationError& e) {
    rd.fail(p, e.what());
  }
}

void read_adapter(const Reader& rd, const Json& j, AdapterSpec& spec) {
  const std::string p = "adapter";
  rd.check_object(j, p);
  rd.check_keys(j, p, {"method", "rank", "target_roles", "alpha1", "alpha2", "epsilon_nominal", "initial_rank",
                       "target_rank", "orth", "alloc", "ffm_sharing", "glora_families"});
  Method method = spec.method;
  int rank = spec.rank;
  rd.get_enum(j, p, "method", method, [](const std::string& s) { return parse_method(s); });
  rd.get_int(j, p, "rank", rank);
  spec = AdapterSpec::for_method(method, rank);
  if (j.contains("target_roles")) {
    const Json& v = j.at("target_roles");
    if (!v.is_array()) rd.fail("adapter.target_roles", "expected an array of role names");
    RoleSet roles;
    for (const Json& item : v) {
      if (!item.is_string()) rd.fail("adapter.target_roles", "expected role names");
      try {
        roles.insert(parse_role(item.get<std::string>()));
      } catch (const std::exception& e) {
        rd.fail("adapter.target_roles", e.what());
      }
    }
    spec.target_roles = roles;
  }
  rd.get_double(j, p, "alpha1", spec.alpha1);
  rd.get_double(j, p, "alpha2", spec.alpha2);
  rd.get_double(j, p, "epsilon_nominal", spec.epsilon_nominal);
  rd.get_int(j, p, "initial_rank", spec.initial_rank);
  rd.get_int(j, p, "target_rank", spec.target_rank);
  rd.get_bool(j, p, "orth", spec.orth_on);
  rd.get_bool(j, p, "alloc", spec.alloc_on);
  rd.get_enum(j, p, "ffm_sharing", spec.ffm_sharing, [](const std::string& s) { return parse_ffm_sharing(s); });
  if (j.contains("glora_families")) {
    const Json& v = j.at("glora_families");
    if (!v.is_array()) rd.fail("adapter.glora_families", "expected an array of family letters");
    GloraFamilies fam;
    for (const Json& item : v) {
      const std::string s = item.is_string() ? item.get<std::string>() : std::string();
      if (s.size() != 1 || s[0] < 'A' || s[0] > 'E') rd.fail("adapter.glora_families", "families are A, B, C, D, E");
      fam.insert(static_cast<GloraFamily>(s[0] - 'A'));
    }
    spec.glora_families = fam;
  }
}

void read_train(const Reader& rd, const Json& j, const std::string& p, TrainConfig& t) {
  rd.check_object(j, p);
  rd.check_keys(j, p, {"learning_rate", "epochs", "batch_size", "grad_accumulation", "orth_weight", "weight_decay",
                       "grad_clip", "max_steps"});
  if (j.contains("learning_rate")) {
    const Json& v = j.at("learning_rate");
    if (v.is_null()) {
      t.learning_rate.reset();
    } else if (v.is_number()) {
      t.learning_rate = v.get<double>();
    } else {
      rd.fail(p + ".learning_rate", "expected a number or null");
    }
  }
  rd.get_int(j, p, "epochs", t.epochs);
  rd.get_int(j, p, "batch_size", t.batch_size);
  rd.get_int(j, p, "grad_accumulation", t.grad_accumulation);
  rd.get_double(j, p, "orth_weight", t.orth_weight);
  rd.get_double(j, p, "weight_decay", t.weight_decay);
  rd.get_double(j, p, "grad_clip", t.grad_clip);
  rd.get_int(j, p, "max_steps", t.max_steps);
  try {
    t.validate();
  } catch (const ValidationError& e) {
    rd.fail(p, e.what());
  }
}

void read_task(const Reader& rd, const Json& j, RunConfig& cfg) {
  const std::string p = "task";
  TaskSpec& t = cfg.task;
  rd.check_object(j, p);
  rd.check_keys(j, p, {"kind", "payload_vocab", "min_len", "max_len", "n_pretrain", "n_adapt_small",
                       "n_adapt_medium", "n_adapt_large", "n_eval", "perm_seed", "seed",
                       "pretrain_shift_fraction", "ood_swap_fraction"});
  rd.get_enum(j, p, "kind", t.kind, [](const std::string& s) { return parse_task_kind(s); });
  rd.get_int(j, p, "payload_vocab", t.payload_vocab);
  rd.get_int(j, p, "min_len", t.min_len);
  rd.get_int(j, p, "max_len", t.max_len);
  rd.get_int(j, p, "n_pretrain", t.n_pretrain);
  rd.get_int(j, p, "n_adapt_small", t.n_adapt_small);
  rd.get_int(j, p, "n_adapt_medium", t.n_adapt_medium);
  rd.get_int(j, p, "n_adapt_large", t.n_adapt_large);
  rd.get_int(j, p, "n_eval", t.n_eval);
  rd.get_int(j, p, "perm_seed", t.perm_seed);
  rd.get_int(j, p, "seed", cfg.task_seed);
  rd.get_double(j, p, "pretrain_shift_fraction", t.pretrain_shift_fraction);
  rd.get_double(j, p, "ood_swap_fraction", t.ood_swap_fraction);
  try {
    t.validate();
  } catch (const ValidationError& e) {
    rd.fail(p, e.what());
  }
}

}  // namespace

RunConfig parse_run_config(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    std::string msg = e.what();
    // Drop the library's "[json.exception.parse_error.101] " prefix.
    if (const auto cut = msg.find("] "); cut != std::string::npos) msg = msg.substr(cut + 2);
    throw ConfigError("", line_at(text, e.byte == 0 ? 0 : e.byte - 1), msg);
  }
  const Reader rd(text);
  RunConfig cfg;
  rd.check_object(doc, "");
  rd.check_keys(doc, "", {"arch", "adapter", "train", "pretrain", "task", "data_size", "seed"});
  if (doc.contains("arch")) read_arch(rd, doc.at("arch"), cfg.arch);
  if (doc.contains("adapter")) read_adapter(rd, doc.at("adapter"), cfg.adapter);
  if (doc.contains("train")) read_train(rd, doc.at("train"), "train", cfg.train);
  if (doc.contains("pretrain")) read_train(rd, doc.at("pretrain"), "pretrain", cfg.pretrain);
  if (doc.contains("task")) read_task(rd, doc.at("task"), cfg);
  rd.get_enum(doc, "", "data_size", cfg.data_size, [](const std::string& s) { return parse_data_size(s); });
  rd.get_int(doc, "", "seed", cfg.seed);
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ConfigError("", 0, e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", 0, "cannot open " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string run_config_json(const RunConfig& config, int indent) { return detail::to_json(config).dump(indent) + "\n"; }

// ---------------------------------------------------------------------------
// JSON rendering

namespace detail {

Json to_json(const ArchSpec& a) {
  return Json{{"preset", a.name},          {"d_model", a.d_model},         {"n_enc_layers", a.n_enc_layers},
              {"n_dec_layers", a.n_dec_layers}, {"n_heads", a.n_heads},   {"d_ffn", a.d_ffn},
              {"vocab_size", a.vocab_size}, {"max_src_len", a.max_src_len}, {"max_tgt_len", a.max_tgt_len},
              {"frontend_mels", a.frontend_mels}};
}

Json to_json(const AdapterSpec& s) {
  Json roles = Json::array();
  for (Role r : kAllRoles) {
    if (s.roles().contains(r)) roles.push_back(std::string(to_string(r)));
  }
  Json fam = Json::array();
  for (char c = 'A'; c <= 'E'; ++c) {
    if (s.glora_families.contains(static_cast<GloraFamily>(c - 'A'))) fam.push_back(std::string(1, c));
  }
  return Json{{"method", std::string(to_string(s.method))},
              {"rank", s.rank},
              {"target_roles", roles},
              {"alpha1", s.alpha1},
              {"alpha2", s.alpha2},
              {"epsilon_nominal", s.epsilon_nominal},
              {"initial_rank", s.initial_rank},
              {"target_rank", s.target_rank},
              {"orth", s.orth_on},
              {"alloc", s.alloc_on},
              {"ffm_sharing", std::string(to_string(s.ffm_sharing))},
              {"glora_families", fam}};
}

Json to_json(const TrainConfig& t) {
  Json j{{"epochs", t.epochs},           {"batch_size", t.batch_size}, {"grad_accumulation", t.grad_accumulation},
         {"orth_weight", t.orth_weight}, {"weight_decay", t.weight_decay}, {"grad_clip", t.grad_clip},
         {"max_steps", t.max_steps}};
  j["learning_rate"] = t.learning_rate ? Json(*t.learning_rate) : Json(nullptr);
  return j;
}

Json to_json(const TaskSpec& t) {
  return Json{{"kind", std::string(to_string(t.kind))},
              {"payload_vocab", t.payload_vocab},
              {"min_len", t.min_len},
              {"max_len", t.max_len},
              {"n_pretrain", t.n_pretrain},
              {"n_adapt_small", t.n_adapt_small},
              {"n_adapt_medium", t.n_adapt_medium},
              {"n_adapt_large", t.n_adapt_large},
              {"n_eval", t.n_eval},
              {"perm_seed", t.perm_seed},
              {"pretrain_shift_fraction", t.pretrain_shift_fraction},
              {"ood_swap_fraction", t.ood_swap_fraction}};
}

Json to_json(const RunConfig& c) {
  Json task = to_json(c.task);
  task["seed"] = c.task_seed;
  return Json{{"arch", to_json(c.arch)},
              {"adapter", to_json(c.adapter)},
              {"train", to_json(c.train)},
              {"pretrain", to_json(c.pretrain)},
              {"task", task},
              {"data_size", std::string(to_string(c.data_size))},
              {"seed", c.seed}};
}

Json to_json(const StepRecord& r) {
  return Json{{"step", r.step}, {"epoch", r.epoch}, {"ce", r.ce},       {"l1", r.l1},
              {"l2", r.l2},     {"orth", r.orth},   {"total", r.total}};
}

Json to_json(const RankReport& report) {
  Json panels = Json::array();
  for (const auto& p : report.panels) {
    Json rows = Json::object();
    for (std::size_t i = 0; i < p.roles.size(); ++i) rows["W_" + std::string(to_string(p.roles[i]))] = p.cells[i];
    panels.push_back(Json{{"group", std::string(to_string(p.group))}, {"rows", rows}});
  }
  return Json{{"method", std::string(to_string(report.method))},
              {"threshold", report.threshold},
              {"total", report.total()},
              {"panels", panels}};
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

}  // namespace detail

}  // namespace peftlab
