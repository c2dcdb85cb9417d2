#pragma once

// Layer vocabulary, the four denoiser architectures and the Adam update.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xmod/autodiff.hpp"
#include "xmod/sampler.hpp"
#include "xmod/tensor.hpp"

namespace xmod::nets {

using ad::Var;

enum class Arch { UNetDirect, ADM, UViT, DiT };
enum class Preset { Paper, Lite };

// CLI spelling: unet | adm | uvit | dit
Arch parse_arch(std::string_view name);
const char* arch_name(Arch arch);
Preset parse_preset(std::string_view name);
const char* preset_name(Preset preset);

struct ArchConfig {
    Arch arch = Arch::ADM;
    Preset preset = Preset::Lite;
    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 4};
    int res_blocks_per_stage = 2;
    int attention_heads = 4;
    int transformer_depth = 0;
    int hidden_size = 0;
    int patch_size = 0;
    int norm_groups = 0;

    static ArchConfig make(Arch arch, Preset preset);
    void validate() const;

    // One `key=value` per line, fixed order.
    std::string to_text() const;
    static ArchConfig from_text(std::string_view text);

    // Spatial sizes are reflect-padded up to a multiple of this before the network runs.
    int pad_multiple() const;
    // UNetDirect maps the condition straight to the target; the others predict v.
    bool is_diffusion() const { return arch != Arch::UNetDirect; }
    int time_embedding_dim() const;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class Init { TruncNormal, Zeros, Ones };

struct ParamSpec {
    std::string name;
    Shape shape;
    Init init = Init::TruncNormal;
    std::int64_t fan_in = 1;
};

// Named parameters in declaration order.
template <typename T>
class ParamTree {
  public:
    Var<T>& add(const std::string& name, Tensor<T> value);
    const Var<T>& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }
    std::int64_t param_count() const;
    // Gradients live on the shared graph nodes, not in the tree structure.
    void zero_grad() const;

    template <typename U>
    ParamTree<U> cast() const {
        ParamTree<U> out;
        for (const auto& [name, v] : entries_) out.add(name, v.value().template cast<U>());
        return out;
    }

  private:
    std::vector<std::pair<std::string, Var<T>>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Reverse-mode gradient of a scalar function of the tree, returned as a congruent tree.
template <typename T>
ParamTree<T> grad(const std::function<Var<T>()>& scalar_fn, const ParamTree<T>& params);

std::vector<ParamSpec> declare_params(const ArchConfig& cfg);
std::int64_t param_count(const ArchConfig& cfg);
template <typename T>
std::int64_t param_count(const ParamTree<T>& tree) {
    return tree.param_count();
}

// Truncated-normal (2 sigma) fan-in initialization; each tensor draws from its own stream keyed by
// (seed, name) so the tree does not depend on declaration order.
ParamTree<float> init_params(const std::vector<ParamSpec>& specs, std::uint64_t seed);

// z and condition are (N, 1, H, W); t has one entry per batch row. UNetDirect ignores z and t.
template <typename T>
Var<T> apply(const ArchConfig& cfg, const ParamTree<T>& params, const Var<T>& z, const std::vector<double>& t,
             const Var<T>& condition);

struct DenoiserModel {
    ArchConfig config;
    ParamTree<float> params;

    // Inference without graph recording.
    Tensor<float> predict(const Tensor<float>& z, const std::vector<double>& t, const Tensor<float>& condition) const;
};

DenoiserModel build_model(const ArchConfig& cfg, std::uint64_t seed);

// Adapts a diffusion model to the sampler interface (64-bit in and out, 32-bit inside).
class NetDenoiser final : public Denoiser {
  public:
    explicit NetDenoiser(const DenoiserModel& model);
    Tensor<double> predict_v(const Tensor<double>& z, double t, const Tensor<double>& condition) const override;

  private:
    const DenoiserModel& model_;
};

// --- layers ---

// Interleaved [sin(f_k t), cos(f_k t)] with f_k geometric from 1 to 1e4.
std::vector<double> sinusoidal_embedding(double t, int dim);
// (L, dim) 2D sin-cos table for a gh x gw token grid, row-major positions.
Tensor<double> sincos_position_table(std::int64_t gh, std::int64_t gw, int dim);

template <typename T>
Var<T> swiglu(const Var<T>& x, const Var<T>& w_gate, const Var<T>& b_gate, const Var<T>& w_val, const Var<T>& b_val,
              const Var<T>& w_out, const Var<T>& b_out);
// x: (N, L, d); qkv_w: (d, 3d); proj_w: (d, d).
template <typename T>
Var<T> attention(const Var<T>& x, const Var<T>& qkv_w, const Var<T>& qkv_b, const Var<T>& proj_w,
                 const Var<T>& proj_b, int heads);
// x (1 + scale) + shift, with shift/scale broadcast against x.
template <typename T>
Var<T> adaln_modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scale);
// (N, C, H, W) -> (N, (H/p)(W/p), C p p) and back.
template <typename T>
Var<T> patchify(const Var<T>& x, int p);
template <typename T>
Var<T> unpatchify(const Var<T>& seq, int p, std::int64_t channels, std::int64_t h, std::int64_t w);

// --- optimizer ---

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::int64_t step = 0;
    std::vector<Tensor<float>> m, v;
};

// Gradients of every parameter in tree order; missing gradients read as zero.
std::vector<Tensor<float>> collect_grads(const ParamTree<float>& params);
void adam_step(ParamTree<float>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
               const AdamConfig& cfg = {});

}  // namespace xmod::nets
