#include "xmod/nets.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "xmod/rng.hpp"
#include "xmod/text.hpp"

namespace xmod::nets {

using namespace xmod::ad;

Arch parse_arch(std::string_view name) {
    if (name == "unet") return Arch::UNetDirect;
    if (name == "adm") return Arch::ADM;
    if (name == "uvit") return Arch::UViT;
    if (name == "dit") return Arch::DiT;
    throw std::invalid_argument("unknown architecture '" + std::string(name) + "' (expected unet, adm, uvit or dit)");
}

const char* arch_name(Arch arch) {
    switch (arch) {
    case Arch::UNetDirect: return "unet";
    case Arch::ADM: return "adm";
    case Arch::UViT: return "uvit";
    case Arch::DiT: return "dit";
    }
    return "?";
}

Preset parse_preset(std::string_view name) {
    if (name == "paper") return Preset::Paper;
    if (name == "lite") return Preset::Lite;
    throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected paper or lite)");
}

const char* preset_name(Preset preset) { return preset == Preset::Paper ? "paper" : "lite"; }

ArchConfig ArchConfig::make(Arch arch, Preset preset) {
    const bool paper = preset == Preset::Paper;
    ArchConfig c;
    c.arch = arch;
    c.preset = preset;
    c.base_channels = paper ? 128 : 32;
    switch (arch) {
    case Arch::UNetDirect:
        c.res_blocks_per_stage = 1;
        c.attention_heads = 0;
        c.norm_groups = paper ? 32 : 8;
        break;
    case Arch::ADM:
        c.res_blocks_per_stage = 2;
        c.attention_heads = 4;
        break;
    case Arch::UViT:
        c.res_blocks_per_stage = 2;
        c.attention_heads = 4;
        c.transformer_depth = paper ? 16 : 4;
        c.hidden_size = 4 * c.base_channels;
        break;
    case Arch::DiT:
        c.base_channels = 0;
        c.channel_multipliers.clear();
        c.res_blocks_per_stage = 0;
        c.attention_heads = paper ? 16 : 4;
        c.transformer_depth = paper ? 24 : 4;
        c.hidden_size = paper ? 1024 : 128;
        c.patch_size = paper ? 16 : 4;
        break;
    }
    return c;
}

void ArchConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid architecture config: " + m); };
    if (arch == Arch::DiT) {
        if (!channel_multipliers.empty()) fail("DiT takes no channel multipliers");
        if (hidden_size < 4 || hidden_size % 4 != 0) fail("DiT hidden size must be a positive multiple of 4");
        if (attention_heads < 1 || hidden_size % attention_heads != 0) fail("heads must divide the hidden size");
        if (transformer_depth < 1) fail("DiT needs at least one block");
        if (patch_size < 1) fail("patch size must be positive");
        return;
    }
    if (channel_multipliers != std::vector<int>{1, 2, 4}) fail("U-shaped nets use channel multipliers 1,2,4");
    if (base_channels < 1) fail("base channels must be positive");
    if (res_blocks_per_stage < 1) fail("need at least one residual block per stage");
    if (patch_size != 0) fail("patch size applies to DiT only");
    const int deepest = base_channels * channel_multipliers.back();
    switch (arch) {
    case Arch::UNetDirect:
        if (norm_groups < 1 || base_channels % norm_groups != 0) fail("group count must divide the base channels");
        if (transformer_depth != 0) fail("UNetDirect has no transformer");
        break;
    case Arch::ADM:
        if (attention_heads < 1 || (2 * base_channels) % attention_heads != 0) fail("heads must divide attention width");
        if (transformer_depth != 0) fail("ADM has no transformer");
        break;
    case Arch::UViT:
        if (transformer_depth < 1) fail("UViT needs a transformer");
        if (hidden_size != deepest) fail("UViT transformer width must equal the deepest stage width");
        if (hidden_size % 4 != 0) fail("UViT transformer width must be a multiple of 4");
        if (attention_heads < 1 || hidden_size % attention_heads != 0) fail("heads must divide the hidden size");
        break;
    case Arch::DiT:
        break;
    }
}

std::string ArchConfig::to_text() const {
    std::ostringstream os;
    os << "arch=" << arch_name(arch) << "\n";
    os << "preset=" << preset_name(preset) << "\n";
    os << "base_channels=" << base_channels << "\n";
    os << "channel_multipliers=";
    for (std::size_t i = 0; i < channel_multipliers.size(); ++i) os << (i ? "," : "") << channel_multipliers[i];
    os << "\n";
    os << "res_blocks_per_stage=" << res_blocks_per_stage << "\n";
    os << "attention_heads=" << attention_heads << "\n";
    os << "transformer_depth=" << transformer_depth << "\n";
    os << "hidden_size=" << hidden_size << "\n";
    os << "patch_size=" << patch_size << "\n";
    os << "norm_groups=" << norm_groups << "\n";
    return os.str();
}

ArchConfig ArchConfig::from_text(std::string_view text) {
    ArchConfig c;
    std::map<std::string, std::string> kv;
    for (const auto& line : split(text, '\n')) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("malformed config line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw std::invalid_argument(std::string("config is missing '") + key + "'");
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto take_int = [&](const char* key) { return static_cast<int>(parse_int(take(key), key)); };
    c.arch = parse_arch(take("arch"));
    c.preset = parse_preset(take("preset"));
    c.base_channels = take_int("base_channels");
    c.channel_multipliers.clear();
    const std::string mults = take("channel_multipliers");
    if (!mults.empty()) {
        for (const auto& m : split(mults, ',')) c.channel_multipliers.push_back(static_cast<int>(parse_int(m, "multiplier")));
    }
    c.res_blocks_per_stage = take_int("res_blocks_per_stage");
    c.attention_heads = take_int("attention_heads");
    c.transformer_depth = take_int("transformer_depth");
    c.hidden_size = take_int("hidden_size");
    c.patch_size = take_int("patch_size");
    c.norm_groups = take_int("norm_groups");
    if (!kv.empty()) throw std::invalid_argument("unknown config key '" + kv.begin()->first + "'");
    c.validate();
    return c;
}

int ArchConfig::pad_multiple() const {
    switch (arch) {
    case Arch::UNetDirect:
    case Arch::ADM: return 4;
    case Arch::UViT: return 8;
    case Arch::DiT: return patch_size;
    }
    return 1;
}

int ArchConfig::time_embedding_dim() const {
    switch (arch) {
    case Arch::UNetDirect: return 0;
    case Arch::ADM:
    case Arch::UViT: return 4 * base_channels;
    case Arch::DiT: return hidden_size;
    }
    return 0;
}

// ---- ParamTree ----

template <typename T>
Var<T>& ParamTree<T>::add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    if (!value.all_finite()) throw std::invalid_argument("parameter '" + name + "' is not finite");
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var<T>::parameter(std::move(value)));
    return entries_.back().second;
}

template <typename T>
const Var<T>& ParamTree<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
std::int64_t ParamTree<T>::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, v] : entries_) n += v.value().size();
    return n;
}

template <typename T>
void ParamTree<T>::zero_grad() const {
    for (const auto& [name, v] : entries_) v.node()->grad = Tensor<T>();
}

template <typename T>
ParamTree<T> grad(const std::function<Var<T>()>& scalar_fn, const ParamTree<T>& params) {
    params.zero_grad();
    backward(scalar_fn());
    ParamTree<T> out;
    for (const auto& [name, v] : params.entries()) out.add(name, v.grad().empty() ? Tensor<T>(v.shape()) : v.grad());
    params.zero_grad();
    return out;
}

template class ParamTree<float>;
template class ParamTree<double>;

// ---- layers ----

std::vector<double> sinusoidal_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal embedding dimension must be even");
    const int half = dim / 2;
    std::vector<double> out(static_cast<std::size_t>(dim));
    for (int k = 0; k < half; ++k) {
        const double f = half == 1 ? 1.0 : std::pow(10.0, 4.0 * k / (half - 1));
        out[static_cast<std::size_t>(2 * k)] = std::sin(f * t);
        out[static_cast<std::size_t>(2 * k + 1)] = std::cos(f * t);
    }
    return out;
}

Tensor<double> sincos_position_table(std::int64_t gh, std::int64_t gw, int dim) {
    if (dim % 4 != 0) throw std::invalid_argument("position table dimension must be a multiple of 4");
    const int quarter = dim / 4;
    Tensor<double> out(Shape{gh * gw, dim});
    for (std::int64_t y = 0; y < gh; ++y) {
        for (std::int64_t x = 0; x < gw; ++x) {
            double* row = out.ptr() + (y * gw + x) * dim;
            for (int k = 0; k < quarter; ++k) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
                row[k] = std::sin(static_cast<double>(y) * omega);
                row[quarter + k] = std::cos(static_cast<double>(y) * omega);
                row[2 * quarter + k] = std::sin(static_cast<double>(x) * omega);
                row[3 * quarter + k] = std::cos(static_cast<double>(x) * omega);
            }
        }
    }
    return out;
}

template <typename T>
Var<T> swiglu(const Var<T>& x, const Var<T>& w_gate, const Var<T>& b_gate, const Var<T>& w_val, const Var<T>& b_val,
              const Var<T>& w_out, const Var<T>& b_out) {
    return linear(mul(silu(linear(x, w_gate, b_gate)), linear(x, w_val, b_val)), w_out, b_out);
}

template <typename T>
Var<T> attention(const Var<T>& x, const Var<T>& qkv_w, const Var<T>& qkv_b, const Var<T>& proj_w,
                 const Var<T>& proj_b, int heads) {
    if (x.rank() != 3) throw ShapeError("attention expects (N, L, d), got " + shape_str(x.shape()));
    const std::int64_t d = x.dim(2);
    if (heads < 1 || d % heads != 0) throw ShapeError("attention heads must divide the width");
    return linear(packed_attention(linear(x, qkv_w, qkv_b), heads), proj_w, proj_b);
}

template <typename T>
Var<T> adaln_modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scale_v) {
    return add(mul(x, add_scalar(scale_v, 1.0)), shift);
}

template <typename T>
Var<T> patchify(const Var<T>& x, int p) {
    if (x.rank() != 4) throw ShapeError("patchify expects (N, C, H, W)");
    const auto& s = x.shape();
    if (p < 1 || s[2] % p != 0 || s[3] % p != 0) throw ShapeError("patchify: " + shape_str(s) + " not divisible by patch " + std::to_string(p));
    auto y = reshape(x, {s[0], s[1], s[2] / p, p, s[3] / p, p});
    y = permute(y, {0, 2, 4, 1, 3, 5});
    return reshape(y, {s[0], (s[2] / p) * (s[3] / p), s[1] * p * p});
}

template <typename T>
Var<T> unpatchify(const Var<T>& seq, int p, std::int64_t channels, std::int64_t h, std::int64_t w) {
    if (seq.rank() != 3 || p < 1 || h % p != 0 || w % p != 0 || seq.dim(1) != (h / p) * (w / p) ||
        seq.dim(2) != channels * p * p) {
        throw ShapeError("unpatchify: sequence " + shape_str(seq.shape()) + " does not match the target grid");
    }
    const std::int64_t n = seq.dim(0);
    auto y = reshape(seq, {n, h / p, w / p, channels, p, p});
    y = permute(y, {0, 3, 1, 4, 2, 5});
    return reshape(y, {n, channels, h, w});
}

namespace {

// Architecture code runs in two modes: declaring parameter shapes (no tensors touched) and applying
// the network. Operations on activations go through run() so the declare pass skips them.
template <typename T>
class Ctx {
  public:
    explicit Ctx(std::vector<ParamSpec>* specs) : specs_(specs) {}
    explicit Ctx(const ParamTree<T>* params) : params_(params) {}

    bool declaring() const { return specs_ != nullptr; }

    Var<T> param(const std::string& name, Shape shape, Init init, std::int64_t fan_in = 1) {
        if (declaring()) {
            specs_->push_back({name, std::move(shape), init, fan_in});
            return {};
        }
        const auto& v = params_->get(name);
        if (v.shape() != shape) {
            throw ShapeError("parameter '" + name + "' has shape " + shape_str(v.shape()) + ", expected " + shape_str(shape));
        }
        return v;
    }

    template <typename F>
    Var<T> run(F&& f) {
        return declaring() ? Var<T>() : f();
    }

  private:
    std::vector<ParamSpec>* specs_ = nullptr;
    const ParamTree<T>* params_ = nullptr;
};

template <typename T>
Var<T> conv(Ctx<T>& c, const std::string& name, const Var<T>& x, std::int64_t cin, std::int64_t cout, int k,
            bool zero = false) {
    auto w = c.param(name + ".w", {cout, cin, k, k}, zero ? Init::Zeros : Init::TruncNormal, cin * k * k);
    auto b = c.param(name + ".b", {cout}, Init::Zeros);
    return c.run([&] { return conv2d(x, w, b); });
}

template <typename T>
Var<T> dense(Ctx<T>& c, const std::string& name, const Var<T>& x, std::int64_t in, std::int64_t out, bool zero = false) {
    auto w = c.param(name + ".w", {in, out}, zero ? Init::Zeros : Init::TruncNormal, in);
    auto b = c.param(name + ".b", {out}, Init::Zeros);
    return c.run([&] { return linear(x, w, b); });
}

// Channel normalization of (N, C, H, W): group norm for the direct U-Net, RMSNorm elsewhere.
template <typename T>
Var<T> channel_norm(Ctx<T>& c, const ArchConfig& cfg, const std::string& name, const Var<T>& x, std::int64_t ch) {
    if (cfg.arch == Arch::UNetDirect) {
        auto g = c.param(name + ".gamma", {ch}, Init::Ones);
        auto b = c.param(name + ".beta", {ch}, Init::Zeros);
        return c.run([&] { return group_norm(x, cfg.norm_groups, g, b); });
    }
    auto s = c.param(name + ".scale", {ch}, Init::Ones);
    return c.run([&] { return rms_norm(x, 1, s); });
}

template <typename T>
Var<T> resblock(Ctx<T>& c, const ArchConfig& cfg, const std::string& name, const Var<T>& x, const Var<T>& temb_act,
                std::int64_t cin, std::int64_t cout) {
    auto h = channel_norm(c, cfg, name + ".norm1", x, cin);
    h = c.run([&] { return silu(h); });
    h = conv(c, name + ".conv1", h, cin, cout, 3);
    h = channel_norm(c, cfg, name + ".norm2", h, cout);
    if (const int tdim = cfg.time_embedding_dim(); tdim > 0) {
        auto mod = dense(c, name + ".emb", temb_act, tdim, 2 * cout, true);
        h = c.run([&] {
            auto m = reshape(mod, {mod.dim(0), 2 * cout, 1, 1});
            return adaln_modulate(h, slice(m, 1, cout, cout), slice(m, 1, 0, cout));
        });
    }
    h = c.run([&] { return silu(h); });
    h = conv(c, name + ".conv2", h, cout, cout, 3);
    Var<T> skip = x;
    if (cin != cout) skip = conv(c, name + ".skip", x, cin, cout, 1);
    return c.run([&] { return add(skip, h); });
}

template <typename T>
Var<T> mha(Ctx<T>& c, const std::string& name, const Var<T>& tokens, std::int64_t d, int heads) {
    auto qkv_w = c.param(name + ".qkv.w", {d, 3 * d}, Init::TruncNormal, d);
    auto qkv_b = c.param(name + ".qkv.b", {3 * d}, Init::Zeros);
    auto proj_w = c.param(name + ".proj.w", {d, d}, Init::TruncNormal, d);
    auto proj_b = c.param(name + ".proj.b", {d}, Init::Zeros);
    return c.run([&] { return attention(tokens, qkv_w, qkv_b, proj_w, proj_b, heads); });
}

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    const auto& s = x.shape();
    return permute(reshape(x, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

template <typename T>
Var<T> from_tokens(const Var<T>& tokens, const Shape& image_shape) {
    return reshape(permute(tokens, {0, 2, 1}), image_shape);
}

template <typename T>
Var<T> conv_attention(Ctx<T>& c, const ArchConfig& cfg, const std::string& name, const Var<T>& x, std::int64_t ch) {
    auto h = channel_norm(c, cfg, name + ".norm", x, ch);
    auto tokens = c.run([&] { return to_tokens(h); });
    auto o = mha(c, name, tokens, ch, cfg.attention_heads);
    return c.run([&] { return add(x, from_tokens(o, x.shape())); });
}

template <typename T>
Var<T> transformer_block(Ctx<T>& c, const std::string& name, const Var<T>& x, const Var<T>& temb_act, std::int64_t d,
                         int heads, int tdim) {
    auto mod = dense(c, name + ".ada", temb_act, tdim, 6 * d, true);
    auto chunk = [&](int i) { return reshape(slice(mod, 1, i * d, d), {mod.dim(0), 1, d}); };
    auto h = c.run([&] { return adaln_modulate(rms_norm(x, -1, Var<T>()), chunk(0), chunk(1)); });
    auto a = mha(c, name + ".attn", h, d, heads);
    auto x1 = c.run([&] { return add(x, mul(chunk(2), a)); });
    auto h2 = c.run([&] { return adaln_modulate(rms_norm(x1, -1, Var<T>()), chunk(3), chunk(4)); });
    const std::int64_t hidden = 4 * d;
    auto wg = c.param(name + ".mlp.gate.w", {d, hidden}, Init::TruncNormal, d);
    auto bg = c.param(name + ".mlp.gate.b", {hidden}, Init::Zeros);
    auto wv = c.param(name + ".mlp.val.w", {d, hidden}, Init::TruncNormal, d);
    auto bv = c.param(name + ".mlp.val.b", {hidden}, Init::Zeros);
    auto wo = c.param(name + ".mlp.out.w", {hidden, d}, Init::TruncNormal, hidden);
    auto bo = c.param(name + ".mlp.out.b", {d}, Init::Zeros);
    auto f = c.run([&] { return swiglu(h2, wg, bg, wv, bv, wo, bo); });
    return c.run([&] { return add(x1, mul(chunk(5), f)); });
}

// Sinusoidal embedding followed by Linear-SiLU-Linear; returns SiLU of the result, ready for projections.
template <typename T>
Var<T> time_embedding(Ctx<T>& c, const std::string& name, const std::vector<double>& t, int dim) {
    Var<T> e;
    if (!c.declaring()) {
        Tensor<T> table(Shape{static_cast<std::int64_t>(t.size()), dim});
        for (std::size_t i = 0; i < t.size(); ++i) {
            const auto row = sinusoidal_embedding(t[i], dim);
            for (int k = 0; k < dim; ++k) table[static_cast<std::int64_t>(i) * dim + k] = static_cast<T>(row[static_cast<std::size_t>(k)]);
        }
        e = Var<T>::constant(std::move(table));
    }
    auto h = dense(c, name + ".fc1", e, dim, dim);
    h = c.run([&] { return silu(h); });
    h = dense(c, name + ".fc2", h, dim, dim);
    return c.run([&] { return silu(h); });
}

template <typename T>
Var<T> position_constant(std::int64_t gh, std::int64_t gw, std::int64_t d) {
    return Var<T>::constant(sincos_position_table(gh, gw, static_cast<int>(d)).template cast<T>());
}

template <typename T>
Var<T> u_shaped(Ctx<T>& c, const ArchConfig& cfg, const Var<T>& input, const std::vector<double>& t) {
    const std::int64_t base = cfg.base_channels;
    std::vector<std::int64_t> ch;
    for (int m : cfg.channel_multipliers) ch.push_back(base * m);
    const std::size_t stages = ch.size();
    const int tdim = cfg.time_embedding_dim();
    const bool uvit = cfg.arch == Arch::UViT;
    const std::int64_t in_ch = cfg.arch == Arch::UNetDirect ? 1 : uvit ? 8 : 2;
    const std::int64_t out_ch = uvit ? 4 : 1;
    auto attn_at = [&](std::size_t stage) { return cfg.arch == Arch::ADM && stage >= 1; };

    Var<T> temb;
    if (tdim > 0) temb = time_embedding(c, "time", t, tdim);

    auto x = uvit ? c.run([&] { return wavelet_analysis(input); }) : input;
    auto h = conv(c, "in", x, in_ch, base, 3);
    std::vector<Var<T>> skips;
    for (std::size_t i = 0; i < stages; ++i) {
        for (int j = 0; j < cfg.res_blocks_per_stage; ++j) {
            const std::string name = "enc." + std::to_string(i) + "." + std::to_string(j);
            h = resblock(c, cfg, name, h, temb, ch[i], ch[i]);
            if (attn_at(i)) h = conv_attention(c, cfg, name + ".attn", h, ch[i]);
        }
        if (i + 1 < stages) {
            skips.push_back(h);
            h = c.run([&] { return pixel_unshuffle(h, 2); });
            h = conv(c, "down." + std::to_string(i), h, 4 * ch[i], ch[i + 1], 1);
        }
    }
    if (cfg.arch == Arch::ADM) {
        h = conv_attention(c, cfg, "mid.attn", h, ch.back());
    } else if (uvit) {
        const std::int64_t d = cfg.hidden_size;
        const Shape image_shape = c.declaring() ? Shape{} : h.shape();
        auto tokens = c.run([&] {
            return add(to_tokens(h), position_constant<T>(image_shape[2], image_shape[3], d));
        });
        for (int b = 0; b < cfg.transformer_depth; ++b) {
            tokens = transformer_block(c, "mid.block." + std::to_string(b), tokens, temb, d, cfg.attention_heads, tdim);
        }
        h = c.run([&] { return from_tokens(tokens, image_shape); });
    }
    for (std::size_t i = stages; i-- > 0;) {
        if (i + 1 < stages) {
            h = conv(c, "up." + std::to_string(i), h, ch[i + 1], 4 * ch[i], 1);
            const Var<T> skip = c.declaring() ? Var<T>() : skips[i];
            h = c.run([&] { return add(pixel_shuffle(h, 2), skip); });
        }
        for (int j = 0; j < cfg.res_blocks_per_stage; ++j) {
            const std::string name = "dec." + std::to_string(i) + "." + std::to_string(j);
            h = resblock(c, cfg, name, h, temb, ch[i], ch[i]);
            if (attn_at(i)) h = conv_attention(c, cfg, name + ".attn", h, ch[i]);
        }
    }
    h = channel_norm(c, cfg, "out.norm", h, base);
    h = c.run([&] { return silu(h); });
    h = conv(c, "out.conv", h, base, out_ch, 3, true);
    if (uvit) h = c.run([&] { return wavelet_synthesis(h); });
    return h;
}

template <typename T>
Var<T> dit(Ctx<T>& c, const ArchConfig& cfg, const Var<T>& input, const std::vector<double>& t) {
    const int p = cfg.patch_size;
    const std::int64_t d = cfg.hidden_size;
    const Shape in_shape = c.declaring() ? Shape{} : input.shape();
    auto tokens = c.run([&] { return patchify(input, p); });
    tokens = dense(c, "embed", tokens, 2LL * p * p, d);
    tokens = c.run([&] { return add(tokens, position_constant<T>(in_shape[2] / p, in_shape[3] / p, d)); });
    auto temb = time_embedding(c, "time", t, static_cast<int>(d));
    for (int b = 0; b < cfg.transformer_depth; ++b) {
        tokens = transformer_block(c, "block." + std::to_string(b), tokens, temb, d, cfg.attention_heads, static_cast<int>(d));
    }
    auto mod = dense(c, "final.ada", temb, d, 2 * d, true);
    auto h = c.run([&] {
        auto shift = reshape(slice(mod, 1, 0, d), {mod.dim(0), 1, d});
        auto sc = reshape(slice(mod, 1, d, d), {mod.dim(0), 1, d});
        return adaln_modulate(rms_norm(tokens, -1, Var<T>()), shift, sc);
    });
    h = dense(c, "final.out", h, d, static_cast<std::int64_t>(p) * p, true);
    return c.run([&] { return unpatchify(h, p, 1, in_shape[2], in_shape[3]); });
}

template <typename T>
Var<T> network(Ctx<T>& c, const ArchConfig& cfg, const Var<T>& input, const std::vector<double>& t) {
    return cfg.arch == Arch::DiT ? dit(c, cfg, input, t) : u_shaped(c, cfg, input, t);
}

std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace

std::vector<ParamSpec> declare_params(const ArchConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    Ctx<float> c(&specs);
    network(c, cfg, Var<float>(), {});
    return specs;
}

std::int64_t param_count(const ArchConfig& cfg) {
    std::int64_t n = 0;
    for (const auto& s : declare_params(cfg)) n += shape_numel(s.shape);
    return n;
}

ParamTree<float> init_params(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
    ParamTree<float> tree;
    for (const auto& s : specs) {
        Tensor<float> t(s.shape);
        switch (s.init) {
        case Init::Zeros: break;
        case Init::Ones: t.fill(1.0f); break;
        case Init::TruncNormal: {
            CounterRng rng({seed, 0x494E4954ULL, name_hash(s.name)});
            const double std = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(s.fan_in, 1)));
            for (auto& v : t.data()) v = static_cast<float>(std * rng.truncated_normal(2.0));
            break;
        }
        }
        tree.add(s.name, std::move(t));
    }
    return tree;
}

template <typename T>
Var<T> apply(const ArchConfig& cfg, const ParamTree<T>& params, const Var<T>& z, const std::vector<double>& t,
             const Var<T>& condition) {
    if (!condition || condition.rank() != 4 || condition.dim(1) != 1) {
        throw ShapeError("condition must be (N, 1, H, W)");
    }
    const std::int64_t n = condition.dim(0), h = condition.dim(2), w = condition.dim(3);
    Var<T> input = condition;
    if (cfg.is_diffusion()) {
        if (!z || z.shape() != condition.shape()) throw ShapeError("z must match the condition shape");
        if (static_cast<std::int64_t>(t.size()) != n) throw ShapeError("need one diffusion time per batch row");
        input = concat<T>({z, condition}, 1);
    }
    const std::int64_t m = cfg.pad_multiple();
    const std::int64_t ph = (m - h % m) % m, pw = (m - w % m) % m;
    if (ph >= h || pw >= w) throw ShapeError("input " + shape_str(condition.shape()) + " too small for the network");
    input = pad_reflect(input, ph, pw);
    Ctx<T> c(&params);
    auto out = network(c, cfg, input, t);
    if (ph) out = slice(out, 2, 0, h);
    if (pw) out = slice(out, 3, 0, w);
    return out;
}

Tensor<float> DenoiserModel::predict(const Tensor<float>& z, const std::vector<double>& t,
                                     const Tensor<float>& condition) const {
    NoGradGuard guard;
    return apply(config, params, z.empty() ? Var<float>() : Var<float>::constant(z), t, Var<float>::constant(condition)).value();
}

DenoiserModel build_model(const ArchConfig& cfg, std::uint64_t seed) {
    return {cfg, init_params(declare_params(cfg), seed)};
}

NetDenoiser::NetDenoiser(const DenoiserModel& model) : model_(model) {
    if (!model.config.is_diffusion()) throw std::invalid_argument("the direct U-Net does not predict v");
}

Tensor<double> NetDenoiser::predict_v(const Tensor<double>& z, double t, const Tensor<double>& condition) const {
    const std::vector<double> ts(static_cast<std::size_t>(z.dim(0)), t);
    return model_.predict(z.cast<float>(), ts, condition.cast<float>()).cast<double>();
}

std::vector<Tensor<float>> collect_grads(const ParamTree<float>& params) {
    std::vector<Tensor<float>> grads;
    grads.reserve(params.size());
    for (const auto& [name, v] : params.entries()) {
        grads.push_back(v.grad().empty() ? Tensor<float>(v.shape()) : v.grad());
    }
    return grads;
}

void adam_step(ParamTree<float>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
               const AdamConfig& cfg) {
    if (grads.size() != params.size()) throw std::invalid_argument("gradient tree does not match the parameters");
    if (state.m.empty()) {
        for (const auto& [name, v] : params.entries()) {
            state.m.emplace_back(v.shape());
            state.v.emplace_back(v.shape());
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("optimizer state does not match the parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& value = params.entries()[k].second.node()->value;
        const auto& g = grads[k];
        if (g.shape() != value.shape()) throw ShapeError("gradient shape mismatch for '" + params.entries()[k].first + "'");
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::int64_t i = 0; i < value.size(); ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            value[i] = static_cast<float>(value[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
        }
    }
}

#define XMOD_NETS_INSTANTIATE(T)                                                                                  \
    template ParamTree<T> grad<T>(const std::function<Var<T>()>&, const ParamTree<T>&);                        \
    template Var<T> apply<T>(const ArchConfig&, const ParamTree<T>&, const Var<T>&, const std::vector<double>&, \
                             const Var<T>&);                                                                    \
    template Var<T> swiglu<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,        \
                              const Var<T>&, const Var<T>&);                                                    \
    template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, int); \
    template Var<T> adaln_modulate<T>(const Var<T>&, const Var<T>&, const Var<T>&);                             \
    template Var<T> patchify<T>(const Var<T>&, int);                                                            \
    template Var<T> unpatchify<T>(const Var<T>&, int, std::int64_t, std::int64_t, std::int64_t);

XMOD_NETS_INSTANTIATE(float)
XMOD_NETS_INSTANTIATE(double)

}  // namespace xmod::nets
