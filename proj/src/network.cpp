#include "vesselkit/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include "vesselkit/error.hpp"
#include "vesselkit/ops.hpp"

namespace vk {

using ad::Shape;
using ad::Tensor;

std::array<std::size_t, 2> ModelConfig::kernels(std::size_t level) const {
    if (!kernel_plan.empty()) return kernel_plan.at(level);
    return level == 0 ? std::array<std::size_t, 2>{7, 3} : std::array<std::size_t, 2>{3, 3};
}

void ModelConfig::validate() const {
    auto bad = [](const std::string& msg) { fail(ErrorCode::config, msg); };
    if (levels < 2) bad("levels must be at least 2, got " + std::to_string(levels));
    if (levels > 8) bad("levels above 8 are not supported, got " + std::to_string(levels));
    if (in_channels == 0) bad("in_channels must be positive");
    if (num_classes == 0) bad("num_classes must be positive");
    if (base_channels == 0) bad("base_channels must be positive");
    if (gn_groups == 0) bad("gn_groups must be positive");
    for (std::size_t l = 0; l < levels; ++l) {
        if (channels(l) % gn_groups != 0) {
            bad("level " + std::to_string(l) + " width " + std::to_string(channels(l)) +
                " is not divisible by gn_groups=" + std::to_string(gn_groups));
        }
    }
    if (!kernel_plan.empty() && kernel_plan.size() != levels) {
        bad("kernel_plan lists " + std::to_string(kernel_plan.size()) + " levels, expected " +
            std::to_string(levels));
    }
    for (const auto& ks : kernel_plan) {
        for (auto k : ks) {
            if (k == 0 || k % 2 == 0) bad("kernel sizes must be odd, got " + std::to_string(k));
        }
    }
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
    std::string plan = "default";
    if (!kernel_plan.empty()) {
        plan.clear();
        for (std::size_t l = 0; l < kernel_plan.size(); ++l) {
            if (l) plan += ';';
            plan += std::to_string(kernel_plan[l][0]) + ',' + std::to_string(kernel_plan[l][1]);
        }
    }
    return {{"in_channels", std::to_string(in_channels)},
            {"num_classes", std::to_string(num_classes)},
            {"levels", std::to_string(levels)},
            {"base_channels", std::to_string(base_channels)},
            {"gn_groups", std::to_string(gn_groups)},
            {"kernel_plan", plan},
            {"deep_supervision", deep_supervision ? "true" : "false"}};
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != value.size() || value[0] == '-') {
        fail(ErrorCode::config, key + " must be a non-negative integer, got '" + value + "'");
    }
    return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on") return true;
    if (value == "false" || value == "0" || value == "off") return false;
    fail(ErrorCode::config, key + " must be true or false, got '" + value + "'");
}

}  // namespace

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    auto get = [&](const char* key, auto&& apply) {
        if (auto it = kv.find(key); it != kv.end()) apply(it->second);
    };
    get("in_channels", [&](const std::string& v) { c.in_channels = parse_size("in_channels", v); });
    get("num_classes", [&](const std::string& v) { c.num_classes = parse_size("num_classes", v); });
    get("levels", [&](const std::string& v) { c.levels = parse_size("levels", v); });
    get("base_channels", [&](const std::string& v) { c.base_channels = parse_size("base_channels", v); });
    get("gn_groups", [&](const std::string& v) { c.gn_groups = parse_size("gn_groups", v); });
    get("deep_supervision", [&](const std::string& v) { c.deep_supervision = parse_bool("deep_supervision", v); });
    get("kernel_plan", [&](const std::string& v) {
        if (v == "default" || v.empty()) return;
        std::stringstream ss(v);
        std::string level;
        while (std::getline(ss, level, ';')) {
            const auto comma = level.find(',');
            if (comma == std::string::npos) fail(ErrorCode::config, "kernel_plan entry '" + level + "' needs two sizes");
            c.kernel_plan.push_back({parse_size("kernel_plan", level.substr(0, comma)),
                                     parse_size("kernel_plan", level.substr(comma + 1))});
        }
    });
    return c;
}

template <class T>
const Tensor<T>& Model<T>::at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorCode::integrity, "model has no parameter '" + name + "'");
    return it->second;
}

template <class T>
std::vector<Tensor<T>> Model<T>::parameter_list() const {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& kv : params) out.push_back(kv.second);
    return out;
}

template <class T>
void Model<T>::zero_grad() {
    for (auto& kv : params) kv.second.zero_grad();
}

template <class T>
Model<T> Model<T>::clone() const {
    Model out;
    out.config = config;
    for (const auto& [name, t] : params) out.params.emplace(name, t.clone());
    return out;
}

namespace {

std::size_t attention_groups(const ModelConfig& cfg, std::size_t c) { return std::gcd(cfg.gn_groups, c); }

std::size_t attention_width(std::size_t cf) { return std::max<std::size_t>(1, cf / 2); }

template <class T>
class Builder {
public:
    Builder(Model<T>& m, std::uint64_t seed) : m_(m), rng_(seed) {}

    void conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
        const std::size_t fan_in = cin * k * k * k;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<T> w(cout * fan_in);
        for (auto& v : w) v = static_cast<T>(dist(rng_));
        add(name + ".weight", {cout, cin, k, k, k}, std::move(w));
        add(name + ".bias", {cout}, std::vector<T>(cout, T{0}));
    }

    void norm(const std::string& name, std::size_t c) {
        add(name + ".gamma", {c}, std::vector<T>(c, T{1}));
        add(name + ".beta", {c}, std::vector<T>(c, T{0}));
    }

private:
    void add(const std::string& name, const Shape& shape, std::vector<T> data) {
        m_.params.emplace(name, Tensor<T>::from(shape, std::move(data), true));
    }

    Model<T>& m_;
    std::mt19937_64 rng_;
};

std::string lvl(const char* prefix, std::size_t l) { return prefix + std::to_string(l); }

template <class T>
Tensor<T> conv(const Model<T>& m, const std::string& name, const Tensor<T>& x, std::size_t stride = 1) {
    const Tensor<T>& w = m.at(name + ".weight");
    return ad::conv3d(x, w, m.at(name + ".bias"), stride, (w.dim(2) - 1) / 2);
}

template <class T>
Tensor<T> norm(const Model<T>& m, const std::string& name, const Tensor<T>& x, std::size_t groups) {
    return ad::group_norm(x, groups, m.at(name + ".gamma"), m.at(name + ".beta"));
}

template <class T>
Tensor<T> block(const Model<T>& m, const std::string& prefix, const Tensor<T>& x) {
    const std::size_t g = m.config.gn_groups;
    Tensor<T> h = ad::relu(norm(m, prefix + ".gn1", conv(m, prefix + ".conv1", x), g));
    return ad::relu(norm(m, prefix + ".gn2", conv(m, prefix + ".conv2", h), g));
}

}  // namespace

template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.config = cfg;
    Builder<T> b(m, seed);
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        const auto ks = cfg.kernels(l);
        const std::size_t cin = l == 0 ? cfg.in_channels : cfg.channels(l - 1);
        b.conv(lvl("enc", l) + ".conv1", cin, cfg.channels(l), ks[0]);
        b.norm(lvl("enc", l) + ".gn1", cfg.channels(l));
        b.conv(lvl("enc", l) + ".conv2", cfg.channels(l), cfg.channels(l), ks[1]);
        b.norm(lvl("enc", l) + ".gn2", cfg.channels(l));
    }
    for (std::size_t l = cfg.levels - 1; l-- > 0;) {
        const std::size_t cf = cfg.channels(l);
        const std::size_t cg = cfg.channels(l + 1);
        const std::size_t ci = attention_width(cf);
        const std::string a = lvl("att", l);
        b.conv(a + ".wf", cf, ci, 1);
        b.norm(a + ".gnf", ci);
        b.conv(a + ".wg", cg, ci, 1);
        b.norm(a + ".gng", ci);
        b.conv(a + ".theta", ci, 1, 1);
        b.norm(a + ".gnt", 1);
        const std::string d = lvl("dec", l);
        b.conv(d + ".conv1", cf + cg, cf, 3);
        b.norm(d + ".gn1", cf);
        b.conv(d + ".conv2", cf, cf, 3);
        b.norm(d + ".gn2", cf);
    }
    b.conv("head", cfg.channels(0), cfg.num_classes, 1);
    if (cfg.deep_supervision) {
        for (std::size_t l = 1; l + 1 < cfg.levels; ++l) b.conv(lvl("ds", l), cfg.channels(l), cfg.num_classes, 1);
    }
    return m;
}

template <class T>
GateOutput<T> attention_gate(const Model<T>& m, const std::string& prefix, const Tensor<T>& f, const Tensor<T>& g) {
    if (f.rank() != 5 || g.rank() != 5 || f.dim(0) != g.dim(0) || f.dim(2) != 2 * g.dim(2) ||
        f.dim(3) != 2 * g.dim(3) || f.dim(4) != 2 * g.dim(4)) {
        fail(ErrorCode::shape, "attention gate needs g at exactly half the spatial size of f, got f " +
                                   ad::shape_str(f.shape()) + " and g " + ad::shape_str(g.shape()));
    }
    const std::size_t ci = m.at(prefix + ".wf.weight").dim(0);
    const std::size_t groups = attention_groups(m.config, ci);
    Tensor<T> qf = norm(m, prefix + ".gnf", conv(m, prefix + ".wf", f, 2), groups);
    Tensor<T> qg = norm(m, prefix + ".gng", conv(m, prefix + ".wg", g), groups);
    Tensor<T> joint = ad::relu(ad::add(qf, qg));
    Tensor<T> coarse = ad::sigmoid(norm(m, prefix + ".gnt", conv(m, prefix + ".theta", joint), 1));
    Tensor<T> alpha = ad::upsample_trilinear(coarse);
    return {ad::mul(f, alpha), alpha};
}

template <class T>
ForwardResult<T> forward(const Model<T>& m, const Tensor<T>& x) {
    const ModelConfig& cfg = m.config;
    if (x.rank() != 5 || x.dim(1) != cfg.in_channels) {
        fail(ErrorCode::shape, "model expects input [N," + std::to_string(cfg.in_channels) + ",D,H,W], got " +
                                   ad::shape_str(x.shape()));
    }
    const std::size_t mult = cfg.size_multiple();
    for (std::size_t a = 2; a < 5; ++a) {
        if (x.dim(a) % mult != 0) {
            fail(ErrorCode::shape, "spatial dims of " + ad::shape_str(x.shape()) + " must be multiples of " +
                                       std::to_string(mult) + " for " + std::to_string(cfg.levels) + " levels");
        }
    }
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        h = block(m, lvl("enc", l), h);
        skips.push_back(h);
        if (l + 1 < cfg.levels) h = ad::maxpool3d(h);
    }
    ForwardResult<T> out;
    std::vector<Tensor<T>> decoded(cfg.levels);
    decoded[cfg.levels - 1] = h;
    for (std::size_t l = cfg.levels - 1; l-- > 0;) {
        const Tensor<T>& g = decoded[l + 1];
        GateOutput<T> gate = attention_gate(m, lvl("att", l), skips[l], g);
        out.alphas.push_back(gate.alpha);
        decoded[l] = block(m, lvl("dec", l), ad::concat_channels(gate.gated, ad::upsample_trilinear(g)));
    }
    std::reverse(out.alphas.begin(), out.alphas.end());
    Tensor<T> logits = conv(m, "head", decoded[0]);
    if (cfg.deep_supervision) {
        for (std::size_t l = 1; l + 1 < cfg.levels; ++l) {
            Tensor<T> side = conv(m, lvl("ds", l), decoded[l]);
            for (std::size_t k = 0; k < l; ++k) side = ad::upsample_trilinear(side);
            logits = ad::add(logits, side);
        }
    }
    out.logits = logits;
    return out;
}

template <class T>
std::size_t count_parameters(const Model<T>& m) {
    std::size_t n = 0;
    for (const auto& kv : m.params) n += kv.second.numel();
    return n;
}

std::size_t default_parameter_count() { return count_parameters(build_model<float>(ModelConfig{}, 0)); }

// ---- checkpoint ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'V', 'A', 'U'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

class Writer {
public:
    template <class U>
    void put(U v) {
        static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
        unsigned char b[sizeof(U)];
        std::memcpy(b, &v, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
        out.insert(out.end(), b, b + sizeof(U));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), c, c + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

    template <class U>
    U get(const char* what) {
        need(sizeof(U), what);
        unsigned char tmp[sizeof(U)];
        std::memcpy(tmp, b_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(U));
        pos_ += sizeof(U);
        U v;
        std::memcpy(&v, tmp, sizeof(U));
        return v;
    }
    const std::uint8_t* take(std::size_t n, const char* what) {
        need(n, what);
        const std::uint8_t* p = b_.data() + pos_;
        pos_ += n;
        return p;
    }
    [[nodiscard]] std::size_t pos() const { return pos_; }
    [[nodiscard]] std::size_t remaining() const { return b_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (b_.size() - pos_ < n) {
            fail(ErrorCode::integrity, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                           std::to_string(pos_));
        }
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model<float>& m, const Metadata& meta) {
    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.params.size()));
    for (const auto& [name, t] : m.params) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) w.put<std::uint64_t>(d);
        w.put<std::uint8_t>(kDtypeF32);
        for (float v : t.data()) w.put<float>(v);
    }
    std::string text;
    for (const auto& [k, v] : m.config.to_kv()) text += k + "=" + v + "\n";
    for (const auto& [k, v] : meta) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            fail(ErrorCode::config, "checkpoint metadata key '" + k + "' contains a reserved character");
        }
        text += "meta." + k + "=" + v + "\n";
    }
    w.bytes(text.data(), text.size());
    return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        fail(ErrorCode::format, "not a checkpoint: magic bytes differ from 'CVAU'");
    }
    r.take(4, "magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion) {
        fail(ErrorCode::format, "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                    std::to_string(kVersion) + ")");
    }
    const auto count = r.get<std::uint32_t>("tensor count");
    std::map<std::string, Tensor<float>> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint16_t>("name length");
        const auto* np = r.take(len, "tensor name");
        std::string name(reinterpret_cast<const char*>(np), len);
        const auto rank = r.get<std::uint8_t>("rank");
        if (rank > 5) fail(ErrorCode::integrity, "tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("dims"));
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype != kDtypeF32) fail(ErrorCode::format, "tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
        const std::size_t n = ad::numel(shape);
        if (n > r.remaining() / sizeof(float)) {
            fail(ErrorCode::integrity, "payload of tensor '" + name + "' is shorter than its shape " +
                                           ad::shape_str(shape) + " requires");
        }
        std::vector<float> data(n);
        for (auto& v : data) v = r.get<float>("payload");
        if (!loaded.emplace(name, Tensor<float>::from(shape, std::move(data), true)).second) {
            fail(ErrorCode::integrity, "duplicate tensor '" + name + "'");
        }
    }
    const auto* tp = r.take(r.remaining(), "config");
    std::string text(reinterpret_cast<const char*>(tp), bytes.size() - (tp - bytes.data()));
    std::map<std::string, std::string> kv;
    Metadata meta;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorCode::integrity, "malformed checkpoint config line '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        if (key.rfind("meta.", 0) == 0) {
            meta[key.substr(5)] = value;
        } else {
            kv[key] = value;
        }
    }
    if (!kv.contains("levels")) fail(ErrorCode::integrity, "checkpoint config block is missing");

    Checkpoint out;
    out.meta = std::move(meta);
    out.model = build_model<float>(ModelConfig::from_kv(kv), 0);
    std::string missing;
    for (auto& [name, t] : out.model.params) {
        auto it = loaded.find(name);
        if (it == loaded.end()) {
            missing += (missing.empty() ? "" : ", ") + name;
            continue;
        }
        if (it->second.shape() != t.shape()) {
            fail(ErrorCode::integrity, "tensor '" + name + "' has shape " + ad::shape_str(it->second.shape()) +
                                           ", expected " + ad::shape_str(t.shape()));
        }
        t = it->second;
        loaded.erase(it);
    }
    if (!missing.empty()) fail(ErrorCode::integrity, "checkpoint is missing parameters: " + missing);
    if (!loaded.empty()) fail(ErrorCode::integrity, "checkpoint has unknown parameter '" + loaded.begin()->first + "'");
    return out;
}

void save_checkpoint(const Model<float>& m, const std::filesystem::path& path, const Metadata& meta) {
    const auto bytes = encode_checkpoint(m, meta);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::io, "cannot write checkpoint '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "short write to '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot read checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

template struct Model<float>;
template struct Model<double>;
template Model<float> build_model<float>(const ModelConfig&, std::uint64_t);
template Model<double> build_model<double>(const ModelConfig&, std::uint64_t);
template GateOutput<float> attention_gate<float>(const Model<float>&, const std::string&, const Tensor<float>&,
                                                 const Tensor<float>&);
template GateOutput<double> attention_gate<double>(const Model<double>&, const std::string&, const Tensor<double>&,
                                                   const Tensor<double>&);
template ForwardResult<float> forward<float>(const Model<float>&, const Tensor<float>&);
template ForwardResult<double> forward<double>(const Model<double>&, const Tensor<double>&);
template std::size_t count_parameters<float>(const Model<float>&);
template std::size_t count_parameters<double>(const Model<double>&);

}  // namespace vk
