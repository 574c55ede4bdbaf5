#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/tensor.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

enum class Method : std::uint8_t { lora, alpha_lora, adalora, s2lora, bitfit, ia3, glora, full_ft };

inline constexpr std::array kAllMethods{Method::lora,   Method::alpha_lora, Method::adalora,
                                        Method::s2lora, Method::bitfit,     Method::ia3,
                                        Method::glora,  Method::full_ft};

std::string_view to_string(Method method);
/// Throws ValidationError naming every accepted method.
Method parse_method(std::string_view name);
std::string method_names();

enum class FfmSharing : std::uint8_t { transpose_tied, per_shape };
std::string_view to_string(FfmSharing sharing);
FfmSharing parse_ffm_sharing(std::string_view name);

// GLoRA factor families: dW = W*A + B, db = W*C + D*b + E.
enum class GloraFamily : std::uint8_t { A, B, C, D, E };
using GloraFamilies = EnumSet<GloraFamily>;
inline constexpr GloraFamilies kAllGloraFamilies{GloraFamily::A, GloraFamily::B, GloraFamily::C,
                                                 GloraFamily::D, GloraFamily::E};

struct AdapterSpec {
  Method method = Method::lora;
  int rank = 8;
  std::optional<RoleSet> target_roles;  // unset: method default
  double alpha1 = 0.05;
  double alpha2 = 0.1;
  // Bound in the sparsity constraint ||S_i||_1 < eps. Never enforced; the
  // alpha1 penalty realizes the constraint.
  double epsilon_nominal = 1e-3;
  int initial_rank = 12;
  int target_rank = 8;
  bool orth_on = true;
  bool alloc_on = true;
  FfmSharing ffm_sharing = FfmSharing::transpose_tied;
  GloraFamilies glora_families = kAllGloraFamilies;

  /// Defaults for `method` at rank `rank`; AdaLoRA takes `rank` as its target
  /// and starts from 12 (48 when the target is 32).
  static AdapterSpec for_method(Method method, int rank = 8);

  RoleSet roles() const;
  /// Number of rank components stored per site (initial rank for AdaLoRA).
  int state_rank() const;
  void validate(const ArchSpec& arch) const;

  std::vector<double> to_vector() const;
  static AdapterSpec from_vector(std::span<const double> values);
};

RoleSet default_roles(Method method);

struct TrainableCount {
  std::size_t count = 0;
  double fraction = 0.0;  // count / base parameters
};

/// Closed-form trainable-scalar count; pure.
TrainableCount count_trainable(const AdapterSpec& spec, const ArchSpec& arch);

// ---------------------------------------------------------------------------
// Per-site states and weight deltas

struct LoRAState {
  Tensor B;      // d2 x r
  Tensor A;      // r x d1
  Tensor alpha;  // scalar, alpha-LoRA only
};

/// B * A.
Tensor delta_lora(Tape& tape, const LoRAState& state);
/// alpha * B * A.
Tensor delta_alpha_lora(Tape& tape, const LoRAState& state);

struct AdaLoRAState {
  Tensor B;       // d2 x r_init
  Tensor lambda;  // r_init
  Tensor A;       // r_init x d1
  Tensor mask;    // r_init values in {0, 1}; never trainable

  std::size_t active_rank() const;
  bool active(std::size_t k) const { return mask[k] != 0.0; }
  void set_active(std::size_t k, bool on) { mask[k] = on ? 1.0 : 0.0; }
};

/// B * diag(lambda ⊙ mask) * A.
Tensor delta_adalora(Tape& tape, const AdaLoRAState& state);

class WiringError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct SharedPair {
  Tensor B;  // rows x r
  Tensor A;  // r x cols
};

struct BasisKey {
  ModuleGroup group = ModuleGroup::EncSam;
  std::size_t rows = 0;
  std::size_t cols = 0;
  auto operator<=>(const BasisKey&) const = default;
  std::string id() const;  // "Enc-FFM@256x64"
};

struct BasisRef {
  BasisKey key;
  bool transposed = false;  // site uses (A^T, B^T)
};

/// Module-group-shared (B, A) pairs. Pairs never cross group boundaries.
class SharedBasisStore {
 public:
  explicit SharedBasisStore(FfmSharing sharing = FfmSharing::transpose_tied) : sharing_(sharing) {}

  FfmSharing sharing() const { return sharing_; }
  /// Key a site resolves to. Under transpose_tied, fc2 resolves to the fc1
  /// signature of its group and is marked transposed.
  BasisRef resolve(ModuleGroup group, Role role, std::size_t out_dim, std::size_t in_dim) const;

  SharedPair& insert(const BasisKey& key, SharedPair pair);
  const SharedPair* find(const BasisKey& key) const;
  SharedPair* find(const BasisKey& key);
  std::size_t size() const { return pairs_.size(); }
  std::size_t pair_count(ModuleGroup group) const;
  const std::map<BasisKey, SharedPair>& pairs() const { return pairs_; }

 private:
  FfmSharing sharing_;
  std::map<BasisKey, SharedPair> pairs_;
};

struct S2State {
  std::size_t site = 0;
  BasisRef basis;
  Tensor s;  // r coefficients, S_i = diag(s)
};

/// B * diag(s) * A for the site's shared pair (A^T diag(s) B^T when transposed).
Tensor delta_s2lora(Tape& tape, const SharedBasisStore& store, const S2State& state);

struct GLoRAState {
  Tensor a_down;  // d1 x r  (A = a_down * a_up, d1 x d1)
  Tensor a_up;    // r x d1
  Tensor b_down;  // d2 x r  (B = b_down * b_up, d2 x d1)
  Tensor b_up;    // r x d1
  Tensor c;       // d1, absent when the site has no bias
  Tensor d;       // scalar, absent when the site has no bias
  Tensor e;       // d2, absent when the site has no bias
};

struct EffectiveWeights {
  Tensor weight;
  Tensor bias;  // undefined when the site keeps no bias
};

/// W + W*A + B and b + W*C + D*b + E.
EffectiveWeights glora_effective(Tape& tape, const GLoRAState& state, const Tensor& weight,
                                 const Tensor& bias);

// ---------------------------------------------------------------------------
// Adapters

class Adapter {
 public:
  Adapter(AdapterSpec spec, ArchSpec arch);
  virtual ~Adapter() = default;
  Adapter(const Adapter&) = delete;
  Adapter& operator=(const Adapter&) = delete;

  Method method() const { return spec_.method; }
  const AdapterSpec& spec() const { return spec_; }
  const ArchSpec& arch() const { return arch_; }

  /// Connects the adapter to the model it will modify. Methods that train
  /// existing parameters (BitFit, full fine-tuning) take their initial
  /// values here.
  virtual void bind(Model& base);

  /// Parameter substitutions for one forward pass, recorded on `tape`.
  virtual ForwardOverrides overrides(Tape& tape, const Model& base) const = 0;

  /// Trainable tensors, named "adapter/<method>/<site-or-group>/<field>".
  virtual std::vector<NamedTensor> trainable() const = 0;
  /// Everything persisted in an adapter checkpoint (trainable plus masks).
  virtual std::vector<NamedTensor> state() const { return trainable(); }
  /// Copies values into the tensors returned by state(), matching by name.
  void load_state(std::span<const NamedTensor> arrays);

  /// Folds the adapter into `model` in place.
  virtual void merge_into(Model& model) const = 0;

  std::size_t trainable_count() const;

 protected:
  std::string prefix() const;

 private:
  AdapterSpec spec_;
  ArchSpec arch_;
};

class LoRAAdapter final : public Adapter {
 public:
  LoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed);
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  void merge_into(Model& model) const override;

  const std::vector<WeightSite>& sites() const { return sites_; }
  std::vector<LoRAState>& states() { return states_; }
  const std::vector<LoRAState>& states() const { return states_; }
  Tensor delta(Tape& tape, std::size_t i) const;

 private:
  std::vector<WeightSite> sites_;
  std::vector<LoRAState> states_;
};

class AdaLoRAAdapter final : public Adapter {
 public:
  AdaLoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed);
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  std::vector<NamedTensor> state() const override;
  void merge_into(Model& model) const override;

  const std::vector<WeightSite>& sites() const { return sites_; }
  std::vector<AdaLoRAState>& states() { return states_; }
  const std::vector<AdaLoRAState>& states() const { return states_; }
  std::size_t total_active_rank() const;
  std::size_t total_triplets() const;

 private:
  std::vector<WeightSite> sites_;
  std::vector<AdaLoRAState> states_;
};

class S2LoRAAdapter final : public Adapter {
 public:
  S2LoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed);
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  void merge_into(Model& model) const override;

  const std::vector<WeightSite>& sites() const { return sites_; }
  SharedBasisStore& store() { return store_; }
  const SharedBasisStore& store() const { return store_; }
  std::vector<S2State>& states() { return states_; }
  const std::vector<S2State>& states() const { return states_; }

 private:
  std::vector<WeightSite> sites_;
  SharedBasisStore store_;
  std::vector<S2State> states_;
};

class BitFitAdapter final : public Adapter {
 public:
  BitFitAdapter(const AdapterSpec& spec, const ArchSpec& arch);
  void bind(Model& base) override;
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  void merge_into(Model& model) const override;

 private:
  std::vector<std::size_t> param_ids_;
  std::vector<NamedTensor> biases_;
};

class IA3Adapter final : public Adapter {
 public:
  IA3Adapter(const AdapterSpec& spec, const ArchSpec& arch);
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  void merge_into(Model& model) const override;

  const std::vector<WeightSite>& sites() const { return sites_; }
  std::vector<Tensor>& scales() { return scales_; }

 private:
  std::vector<WeightSite> sites_;
  std::vector<Tensor> scales_;
};

class GLoRAAdapter final : public Adapter {
 public:
  GLoRAAdapter(const AdapterSpec& spec, const ArchSpec& arch, std::uint64_t seed);
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  std::vector<NamedTensor> state() const override;
  void merge_into(Model& model) const override;

  const std::vector<WeightSite>& sites() const { return sites_; }
  std::vector<GLoRAState>& states() { return states_; }

 private:
  std::vector<NamedTensor> all_fields() const;
  std::vector<WeightSite> sites_;
  std::vector<GLoRAState> states_;
};

class FullFineTune final : public Adapter {
 public:
  FullFineTune(const AdapterSpec& spec, const ArchSpec& arch);
  void bind(Model& base) override;
  ForwardOverrides overrides(Tape& tape, const Model& base) const override;
  std::vector<NamedTensor> trainable() const override;
  void merge_into(Model& model) const override;

 private:
  std::vector<NamedTensor> params_;
};

/// Builds adapter state from architecture alone (no base weights needed,
/// except for BitFit/full fine-tuning which fill in on bind()).
std::unique_ptr<Adapter> make_adapter(const AdapterSpec& spec, const ArchSpec& arch,
                                      std::uint64_t seed);

class AdaptedModel {
 public:
  AdaptedModel(Model base, std::unique_ptr<Adapter> adapter);

  Model& base() { return base_; }
  const Model& base() const { return base_; }
  Adapter& adapter() { return *adapter_; }
  const Adapter& adapter() const { return *adapter_; }

  ForwardOverrides overrides(Tape& tape) const { return adapter_->overrides(tape, base_); }
  Tensor forward(Tape& tape, std::span<const int> src, std::span<const int> tgt) const;
  std::vector<int> greedy_decode(std::span<const int> src, std::size_t max_len) const;

  /// Plain model with every adapter effect folded into the weights.
  Model merge() const;

  std::vector<NamedTensor> trainable() const { return adapter_->trainable(); }
  /// Sum of sizes of distinct requires_grad tensors reachable from the
  /// base model and the adapter.
  std::size_t requires_grad_census() const;

 private:
  Model base_;
  std::unique_ptr<Adapter> adapter_;
};

/// Freezes the base (except under full fine-tuning) and attaches `spec`.
AdaptedModel attach(Model model, const AdapterSpec& spec, std::uint64_t seed);

}  // namespace peftlab
