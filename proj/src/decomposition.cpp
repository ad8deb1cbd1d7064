#include "dlens/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <stdexcept>

#include "dlens/archive.hpp"
#include "dlens/error.hpp"
#include "dlens/linalg.hpp"
#include "dlens/util.hpp"

namespace dlens {

std::string kind_name(ComponentKind kind) {
    switch (kind) {
        case ComponentKind::QK: return "qk";
        case ComponentKind::OV: return "ov";
        case ComponentKind::MLP_IN: return "mlp_in";
        case ComponentKind::MLP_OUT: return "mlp_out";
    }
    return "?";
}

ComponentKind parse_kind(const std::string& name) {
    std::string s;
    for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (s == "qk") return ComponentKind::QK;
    if (s == "ov") return ComponentKind::OV;
    if (s == "mlp_in" || s == "in") return ComponentKind::MLP_IN;
    if (s == "mlp_out" || s == "out") return ComponentKind::MLP_OUT;
    throw ValidationError("unknown component kind '" + name + "' (expected qk, ov, mlp_in, mlp_out)");
}

std::string ComponentId::str() const {
    std::string s = "L" + std::to_string(layer) + ".";
    if (head) s += "H" + std::to_string(*head) + ".";
    return s + kind_name(kind);
}

ComponentId ComponentId::parse(const std::string& s) {
    static const std::regex re(R"(L(\d+)\.(?:H(\d+)\.)?([a-z_]+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ValidationError("malformed component id '" + s + "'");
    ComponentId id;
    id.layer = std::stoul(m[1]);
    if (m[2].matched) id.head = std::stoul(m[2]);
    id.kind = parse_kind(m[3]);
    if (is_attention(id.kind) != id.head.has_value()) throw ValidationError("malformed component id '" + s + "'");
    return id;
}

std::vector<ComponentId> all_components(const ModelConfig& config, const std::vector<ComponentKind>& kinds) {
    auto wanted = [&](ComponentKind k) { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); };
    std::vector<ComponentId> out;
    for (size_t l = 0; l < config.n_layers; ++l) {
        for (auto k : {ComponentKind::QK, ComponentKind::OV}) {
            if (!wanted(k)) continue;
            for (size_t h = 0; h < config.n_heads; ++h) out.push_back({k, l, h});
        }
        for (auto k : {ComponentKind::MLP_IN, ComponentKind::MLP_OUT})
            if (wanted(k)) out.push_back({k, l, std::nullopt});
    }
    return out;
}

namespace {

// [top; body] stacked vertically.
Tensor stack(std::span<const float> top, const Tensor& body) {
    Tensor out = Tensor::matrix(1 + body.rows(), body.cols());
    std::copy(top.begin(), top.end(), out.row(0).begin());
    std::copy(body.values().begin(), body.values().end(), out.data() + body.cols());
    return out;
}

}  // namespace

AugmentedMatrix build_augmented(const Weights& w, ComponentKind kind, size_t layer, std::optional<size_t> head) {
    const auto& c = w.config;
    if (layer >= c.n_layers) throw ValidationError("layer " + std::to_string(layer) + " out of range");
    if (is_attention(kind) && !head) throw std::invalid_argument("build_augmented: head required for " + kind_name(kind));
    if (!is_attention(kind) && head) throw std::invalid_argument("build_augmented: head given for " + kind_name(kind));
    if (head && *head >= c.n_heads) throw ValidationError("head " + std::to_string(*head) + " out of range");
    const auto& L = w.layers[layer];
    AugmentedMatrix aug;
    aug.id = {kind, layer, head};
    switch (kind) {
        case ComponentKind::QK: {
            const size_t h = *head;
            aug.left = stack(L.b_q[h].values(), L.w_q[h]);                // [1+d, dh]
            aug.right = transpose(stack(L.b_k[h].values(), L.w_k[h]));    // [dh, 1+d]
            aug.matrix = matmul(aug.left, aug.right);
            break;
        }
        case ComponentKind::OV: {
            const size_t h = *head, d = c.d_model, dh = c.d_head;
            aug.left = Tensor::matrix(1 + d, dh + 1);
            for (size_t j = 0; j < dh; ++j) aug.left(0, j) = L.b_v[h][j];
            aug.left(0, dh) = 1.0f;
            for (size_t i = 0; i < d; ++i)
                for (size_t j = 0; j < dh; ++j) aug.left(1 + i, j) = L.w_v[h](i, j);
            aug.right = Tensor::matrix(dh + 1, d);
            std::copy(L.w_o[h].values().begin(), L.w_o[h].values().end(), aug.right.data());
            const float share = 1.0f / static_cast<float>(c.n_heads);
            for (size_t j = 0; j < d; ++j) aug.right(dh, j) = L.b_o[j] * share;
            aug.matrix = matmul(aug.left, aug.right);
            break;
        }
        case ComponentKind::MLP_IN: aug.matrix = stack(L.b_in.values(), L.w_in); break;
        case ComponentKind::MLP_OUT: aug.matrix = stack(L.b_out.values(), L.w_out); break;
    }
    return aug;
}

AugmentedMatrix build_augmented(const Weights& weights, const ComponentId& id) {
    return build_augmented(weights, id.kind, id.layer, id.head);
}

Tensor SVDFactors::reconstruct() const { return masked_reconstruct(*this, Tensor::vector(rank(), 1.0f)); }

SVDFactors svd(const AugmentedMatrix& aug, double rank_tol) {
    if (!aug.matrix.all_finite()) throw ValidationError("svd: non-finite entries in " + aug.id.str());
    const linalg::Svd s =
        aug.factored() ? linalg::factored_svd(linalg::Matrix::from_tensor(aug.left), linalg::Matrix::from_tensor(aug.right))
                       : linalg::jacobi_svd(linalg::Matrix::from_tensor(aug.matrix));
    const size_t m = aug.matrix.rows(), n = aug.matrix.cols();
    size_t r = 0;
    const double s1 = s.sigma.empty() ? 0.0 : s.sigma[0];
    while (r < s.sigma.size() && s.sigma[r] > 0.0 && s.sigma[r] >= rank_tol * s1) ++r;

    SVDFactors f;
    f.id = aug.id;
    f.rank_tol = rank_tol;
    f.u = Tensor::matrix(m, r);
    f.v = Tensor::matrix(n, r);
    f.sigma = Tensor::vector(r);
    for (size_t k = 0; k < r; ++k) {
        size_t arg = 0;
        for (size_t i = 1; i < m; ++i)
            if (std::abs(s.u(i, k)) > std::abs(s.u(arg, k))) arg = i;
        const double sign = s.u(arg, k) < 0 ? -1.0 : 1.0;
        f.sigma[k] = static_cast<float>(s.sigma[k]);
        for (size_t i = 0; i < m; ++i) f.u(i, k) = static_cast<float>(sign * s.u(i, k));
        for (size_t i = 0; i < n; ++i) f.v(i, k) = static_cast<float>(sign * s.v(i, k));
    }
    return f;
}

namespace {

void check_mask(const SVDFactors& f, const Tensor& mask) {
    if (mask.size() != f.rank()) {
        throw std::invalid_argument("mask length " + std::to_string(mask.size()) + " != rank " +
                                    std::to_string(f.rank()) + " for " + f.id.str());
    }
    for (float m : mask.values())
        if (!(m >= 0.0f && m <= 1.0f)) throw std::invalid_argument("mask value outside [0,1] for " + f.id.str());
}

Tensor weighted_product(const SVDFactors& f, const std::vector<float>& w) {
    Tensor us = f.u;
    for (size_t i = 0; i < us.rows(); ++i)
        for (size_t k = 0; k < f.rank(); ++k) us(i, k) *= w[k];
    return matmul_nt(us, f.v);
}

}  // namespace

Tensor masked_reconstruct(const SVDFactors& f, const Tensor& mask) {
    check_mask(f, mask);
    std::vector<float> w(f.rank());
    for (size_t k = 0; k < w.size(); ++k) w[k] = f.sigma[k] * mask[k];
    return weighted_product(f, w);
}

Tensor complement_reconstruct(const SVDFactors& f, const Tensor& mask) {
    check_mask(f, mask);
    std::vector<float> w(f.rank());
    for (size_t k = 0; k < w.size(); ++k) w[k] = f.sigma[k] * (1.0f - mask[k]);
    return weighted_product(f, w);
}

double direction_attention_score(const SVDFactors& f, size_t k, std::span<const float> x_i,
                                 std::span<const float> x_j) {
    if (k >= f.rank()) {
        throw ValidationError("direction " + std::to_string(k) + " out of range for " + f.id.str() + " (rank " +
                              std::to_string(f.rank()) + ")");
    }
    if (x_i.size() + 1 != f.in_dim() || x_j.size() + 1 != f.out_dim()) {
        throw std::invalid_argument("direction_attention_score: vector sizes do not match " + f.id.str());
    }
    double a = f.u(0, k), b = f.v(0, k);
    for (size_t i = 0; i < x_i.size(); ++i) a += static_cast<double>(x_i[i]) * f.u(i + 1, k);
    for (size_t j = 0; j < x_j.size(); ++j) b += static_cast<double>(x_j[j]) * f.v(j + 1, k);
    return a * f.sigma[k] * b;
}

std::string cache_stem(const ComponentId& id) {
    std::string s = id.str();
    for (char& c : s)
        if (c == '.') c = '_';
    return s;
}

void save_factors(const std::filesystem::path& dir, const SVDFactors& f) {
    std::filesystem::create_directories(dir);
    TensorArchive a;
    a.tensors["U"] = f.u;
    a.tensors["sigma"] = f.sigma;
    a.tensors["V"] = f.v;
    a.metadata["component"] = f.id.str();
    const std::string stem = cache_stem(f.id);
    write_archive(dir / (stem + ".safetensors"), a);
    Json side;
    side["kind"] = kind_name(f.id.kind);
    side["layer"] = f.id.layer;
    side["head"] = f.id.head ? Json(*f.id.head) : Json(nullptr);
    side["rank_tol"] = f.rank_tol;
    side["rank"] = f.rank();
    side["sign_convention"] = kSignConvention;
    write_json(dir / (stem + ".json"), side);
}

SVDFactors load_factors(const std::filesystem::path& dir, const ComponentId& id) {
    const std::string stem = cache_stem(id);
    const Json side = read_json(dir / (stem + ".json"));
    const TensorArchive a = read_archive(dir / (stem + ".safetensors"));
    SVDFactors f;
    f.id = id;
    f.u = a.at("U");
    f.sigma = a.at("sigma");
    f.v = a.at("V");
    f.rank_tol = side.value("rank_tol", kDefaultRankTol);
    const size_t r = f.sigma.size();
    if (f.u.ndim() != 2 || f.v.ndim() != 2 || f.u.cols() != r || f.v.cols() != r) {
        throw ValidationError("inconsistent SVD factor shapes in " + stem);
    }
    if (side.value("sign_convention", std::string()) != kSignConvention) {
        throw ValidationError("unsupported sign convention in " + stem + ".json");
    }
    return f;
}

SvdCache load_svd_cache(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ValidationError("SVD cache directory not found: " + dir.string());
    std::vector<std::filesystem::path> sidecars;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().extension() == ".json" && e.path().filename() != "manifest.json") sidecars.push_back(e.path());
    std::sort(sidecars.begin(), sidecars.end());
    SvdCache cache;
    for (const auto& p : sidecars) {
        const Json side = read_json(p);
        if (!side.contains("kind")) continue;
        ComponentId id;
        id.kind = parse_kind(side.at("kind").get<std::string>());
        id.layer = side.at("layer").get<size_t>();
        if (!side.at("head").is_null()) id.head = side.at("head").get<size_t>();
        cache.emplace(id, load_factors(dir, id));
    }
    return cache;
}

SvdCache decompose(const Weights& weights, const std::vector<ComponentKind>& kinds, double rank_tol,
                   unsigned threads) {
    const auto ids = all_components(weights.config, kinds);
    std::vector<SVDFactors> out(ids.size());
    parallel_for(ids.size(), threads, [&](size_t i) { out[i] = svd(build_augmented(weights, ids[i]), rank_tol); });
    SvdCache cache;
    for (size_t i = 0; i < ids.size(); ++i) cache.emplace(ids[i], std::move(out[i]));
    return cache;
}

const SVDFactors& factors_for(const SvdCache& cache, const ComponentId& id) {
    auto it = cache.find(id);
    if (it == cache.end()) throw ValidationError("SVD cache has no entry for " + id.str());
    return it->second;
}

}  // namespace dlens
