#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstPayload = 3;
}  // namespace tokens

enum class ModuleGroup : std::uint8_t { EncSam, EncFfm, DecSam, DecCam, DecFfm };
enum class Role : std::uint8_t { q, k, v, o, fc1, fc2 };

inline constexpr std::array kAllGroups{ModuleGroup::EncSam, ModuleGroup::EncFfm, ModuleGroup::DecSam,
                                       ModuleGroup::DecCam, ModuleGroup::DecFfm};
inline constexpr std::array kAllRoles{Role::q, Role::k, Role::v, Role::o, Role::fc1, Role::fc2};

std::string_view to_string(ModuleGroup group);
std::string_view to_string(Role role);
ModuleGroup parse_group(std::string_view name);
Role parse_role(std::string_view name);
bool is_ffm(ModuleGroup group);
bool is_encoder(ModuleGroup group);

/// Small bitmask over an enum with contiguous values starting at zero.
template <class E>
class EnumSet {
 public:
  constexpr EnumSet() = default;
  constexpr EnumSet(std::initializer_list<E> items) {
    for (E e : items) insert(e);
  }
  constexpr void insert(E e) { bits_ |= bit(e); }
  constexpr void erase(E e) { bits_ &= ~bit(e); }
  constexpr bool contains(E e) const { return (bits_ & bit(e)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint32_t bits() const { return bits_; }
  friend constexpr bool operator==(EnumSet, EnumSet) = default;

 private:
  static constexpr std::uint32_t bit(E e) { return std::uint32_t{1} << static_cast<unsigned>(e); }
  std::uint32_t bits_ = 0;
};

using RoleSet = EnumSet<Role>;
using GroupSet = EnumSet<ModuleGroup>;

inline constexpr RoleSet kAllRoleSet{Role::q, Role::k, Role::v, Role::o, Role::fc1, Role::fc2};
inline constexpr GroupSet kAllGroupSet{ModuleGroup::EncSam, ModuleGroup::EncFfm, ModuleGroup::DecSam,
                                       ModuleGroup::DecCam, ModuleGroup::DecFfm};

struct ArchSpec {
  std::string name = "toy-small";
  int d_model = 64;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int n_heads = 4;
  int d_ffn = 256;
  int vocab_size = 64;
  int max_src_len = 32;
  int max_tgt_len = 32;
  // Non-zero selects a two-convolution audio front-end stub over this many
  // input channels in place of the encoder token embedding. The stub is
  // only ever counted, never built.
  int frontend_mels = 0;

  static ArchSpec toy_small();
  static ArchSpec whisper_medium_dims();
  static ArchSpec preset(std::string_view name);

  void validate() const;
  /// Stable 64-bit FNV-1a digest of the dimensional fields.
  std::uint64_t hash() const;
  std::vector<double> to_vector() const;
  static ArchSpec from_vector(std::span<const double> values);

  bool operator==(const ArchSpec& other) const;
};

/// One adaptable projection matrix.
struct WeightSite {
  std::size_t index = 0;
  int layer = 0;
  ModuleGroup group = ModuleGroup::EncSam;
  Role role = Role::q;
  std::size_t out_dim = 0;  // d2
  std::size_t in_dim = 0;   // d1
  bool has_bias = true;

  /// Parameter-name prefix, e.g. "decoder.layers.1.encoder_attn.v_proj".
  std::string name() const;
};

/// Ordered site registry: encoder layers first (q,k,v,o,fc1,fc2 per layer),
/// then decoder layers (self-attention, cross-attention, feed-forward).
std::vector<WeightSite> make_sites(const ArchSpec& arch);

std::vector<WeightSite> enumerate_sites(std::span<const WeightSite> sites, RoleSet roles,
                                        GroupSet groups = kAllGroupSet);

/// Closed-form count of base-model parameters, including the front-end stub.
std::size_t base_parameter_count(const ArchSpec& arch);

/// Closed-form count of every bias vector (projections, layer norms, stub).
std::size_t bias_parameter_count(const ArchSpec& arch);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct LayerNormIds {
  std::size_t gain = 0;
  std::size_t bias = 0;
};

struct SiteParamIds {
  std::size_t weight = 0;
  std::optional<std::size_t> bias;
};

/// Per-forward replacements for base parameters and per-site output scales.
///
/// Slots left undefined fall back to the base model.
struct ForwardOverrides {
  std::vector<Tensor> params;             // indexed by parameter id
  std::vector<Tensor> site_output_scale;  // indexed by site index

  const Tensor* param(std::size_t id) const;
  const Tensor* output_scale(std::size_t site) const;
};

class Model {
 public:
  const ArchSpec& arch() const { return arch_; }
  const std::vector<WeightSite>& sites() const { return sites_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  Tensor& param(std::size_t id) { return params_.at(id).tensor; }
  const Tensor& param(std::size_t id) const { return params_.at(id).tensor; }
  std::optional<std::size_t> find_param(std::string_view name) const;

  const SiteParamIds& site_params(std::size_t site) const { return site_ids_.at(site); }
  /// Every bias parameter id (projection and layer-norm biases).
  std::vector<std::size_t> bias_param_ids() const;

  std::size_t parameter_count() const;
  void set_requires_grad(bool flag);

  /// Deep copy with independent storage.
  Model clone() const;

  // Layout, consumed by the forward pass.
  struct EncoderLayer {
    LayerNormIds attn_norm;
    std::array<std::size_t, 4> attn_sites{};  // q,k,v,o
    LayerNormIds ffn_norm;
    std::array<std::size_t, 2> ffn_sites{};   // fc1, fc2
  };
  struct DecoderLayer {
    LayerNormIds self_norm;
    std::array<std::size_t, 4> self_sites{};
    LayerNormIds cross_norm;
    std::array<std::size_t, 4> cross_sites{};
    LayerNormIds ffn_norm;
    std::array<std::size_t, 2> ffn_sites{};
  };
  struct Layout {
    std::size_t enc_embed = 0;
    std::vector<EncoderLayer> encoder;
    LayerNormIds enc_final;
    std::size_t dec_embed = 0;
    std::size_t dec_positions = 0;
    std::vector<DecoderLayer> decoder;
    LayerNormIds dec_final;
  };
  const Layout& layout() const { return layout_; }
  const Tensor& encoder_positions() const { return enc_positions_; }

 private:
  friend Model build_model(const ArchSpec& arch, std::uint64_t seed);

  ArchSpec arch_;
  std::vector<WeightSite> sites_;
  std::vector<NamedTensor> params_;
  std::vector<SiteParamIds> site_ids_;
  Layout layout_;
  Tensor enc_positions_;  // fixed sinusoidal table
};

/// Projections normal(0, 1/d_in), token embeddings normal(0, 0.3^2), learned
/// positions normal(0, 0.02^2), biases zero, layer-norm gains one.
Model build_model(const ArchSpec& arch, std::uint64_t seed);

/// Whisper-style sinusoidal table [length, channels].
Tensor sinusoidal_positions(std::size_t length, std::size_t channels);

/// Encoder output [len(src), d_model]. `src_valid`, when given, marks the
/// positions that may be attended to; by default every non-pad token is valid.
Tensor encode(Tape& tape, const Model& model, std::span<const int> src,
              const ForwardOverrides* overrides = nullptr,
              std::span<const std::uint8_t> src_valid = {});

/// Teacher-forced decoder logits [len(tgt), vocab].
Tensor decode(Tape& tape, const Model& model, const Tensor& memory, std::span<const int> tgt,
              const ForwardOverrides* overrides = nullptr,
              std::span<const std::uint8_t> src_valid = {});

Tensor forward(Tape& tape, const Model& model, std::span<const int> src, std::span<const int> tgt,
               const ForwardOverrides* overrides = nullptr,
               std::span<const std::uint8_t> src_valid = {});

/// Greedy decoding from BOS; the returned sequence excludes BOS and EOS.
std::vector<int> greedy_decode(const Model& model, std::span<const int> src, std::size_t max_len,
                               const ForwardOverrides* overrides = nullptr);

}  // namespace peftlab
