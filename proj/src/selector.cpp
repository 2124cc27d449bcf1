#include "soupkit/selector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Dense>

#include "soupkit/binary_io.hpp"
#include "soupkit/error.hpp"
#include "soupkit/rng.hpp"

namespace soup {

namespace {

constexpr std::string_view kGmmMagic = "SOUPGMM1";
constexpr std::size_t kEmbedBatch = 32;

void normalize_row(std::span<double> row) {
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw NumericError("embedding row has zero norm");
    for (double& v : row) v /= norm;
}

void rank(std::vector<Candidate>& c) {
    std::sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.domain < b.domain;
    });
}

}  // namespace

EmbeddingSet embed_sequences(const BaseModel& base, const std::vector<std::vector<std::uint32_t>>& sequences,
                             std::string domain, Split source) {
    if (sequences.empty()) throw ConfigError("embed_sequences: no sequences");
    const std::size_t d = base.config.d_model;
    BoundModel model(base, nullptr);
    Tensor<double> rows({sequences.size(), d});
    std::size_t i = 0;
    while (i < sequences.size()) {
        const std::size_t len = sequences[i].size();
        if (len == 0 || len > base.config.context) {
            throw ConfigError("embed_sequences: sequence length " + std::to_string(len) + " outside context");
        }
        std::size_t j = i;
        std::vector<std::uint32_t> flat;
        while (j < sequences.size() && j - i < kEmbedBatch && sequences[j].size() == len) {
            flat.insert(flat.end(), sequences[j].begin(), sequences[j].end());
            ++j;
        }
        const auto hidden = model.hidden(flat, j - i, len);
        for (std::size_t b = 0; b < j - i; ++b) {
            auto row = rows.row(i + b);
            for (std::size_t t = 0; t < len; ++t) {
                const auto h = hidden.row(b * len + t);
                for (std::size_t e = 0; e < d; ++e) row[e] += static_cast<double>(h[e]);
            }
            for (double& v : row) v /= static_cast<double>(len);
            normalize_row(row);
        }
        i = j;
    }
    return EmbeddingSet{std::move(domain), std::move(rows), "mean-final-hidden", source};
}

nlohmann::ordered_json to_json(const SelectionResult& r) {
    nlohmann::ordered_json j;
    j["method"] = r.method;
    nlohmann::ordered_json ranked = nlohmann::ordered_json::array();
    for (const auto& c : r.ranked) ranked.push_back({{"domain", c.domain}, {"score", c.score}});
    j["ranked"] = ranked;
    j["chosen"] = r.chosen;
    j["threshold"] = r.threshold;
    j["max_adapters"] = r.max_adapters;
    j["fallback"] = r.fallback;
    j["details"] = r.details;
    return j;
}

SelectionResult selection_from_json(const nlohmann::json& j) {
    SelectionResult r;
    try {
        r.method = j.at("method").get<std::string>();
        for (const auto& c : j.at("ranked")) {
            r.ranked.push_back({c.at("domain").get<std::string>(), c.at("score").get<double>()});
        }
        r.chosen = j.at("chosen").get<std::vector<std::string>>();
        r.threshold = j.at("threshold").get<double>();
        r.max_adapters = j.at("max_adapters").get<std::size_t>();
        r.fallback = j.at("fallback").get<bool>();
        if (j.contains("details")) r.details = j.at("details");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("selection result: ") + e.what());
    }
    return r;
}

namespace {

void choose(SelectionResult& r, bool strict) {
    for (const auto& c : r.ranked) {
        if (r.chosen.size() >= r.max_adapters) break;
        const bool pass = strict ? c.score > r.threshold : c.score >= r.threshold;
        if (!pass) break;
        r.chosen.push_back(c.domain);
    }
    if (r.chosen.empty() && !r.ranked.empty()) {
        r.chosen.push_back(r.ranked.front().domain);
        r.fallback = true;
    }
}

}  // namespace

SelectionResult cosine_select(const EmbeddingSet& novel, std::span<const EmbeddingSet> training, double threshold,
                              std::size_t max_adapters) {
    if (training.empty()) throw ConfigError("cosine_select: no training embedding sets");
    if (max_adapters == 0) throw ConfigError("cosine_select: max_adapters must be >= 1");
    if (novel.size() == 0) throw ConfigError("cosine_select: empty novel embedding set");
    const std::size_t e = novel.dim();
    auto mean_row = [&](const EmbeddingSet& s) {
        if (s.dim() != e) {
            throw ConfigError("cosine_select: dimension mismatch (" + std::to_string(s.dim()) + " vs " +
                              std::to_string(e) + ") for " + s.domain);
        }
        std::vector<double> m(e, 0.0);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const auto row = s.rows.row(i);
            for (std::size_t k = 0; k < e; ++k) m[k] += row[k];
        }
        for (double& v : m) v /= static_cast<double>(s.size());
        return m;
    };
    // Mean of all pairwise dot products = dot product of the two row means.
    const auto nm = mean_row(novel);
    SelectionResult r;
    r.method = "cosine";
    r.threshold = threshold;
    r.max_adapters = max_adapters;
    for (const auto& t : training) {
        if (t.size() == 0) throw ConfigError("cosine_select: empty training set " + t.domain);
        const auto tm = mean_row(t);
        double s = 0.0;
        for (std::size_t k = 0; k < e; ++k) s += nm[k] * tm[k];
        r.ranked.push_back({t.domain, s});
    }
    rank(r.ranked);
    choose(r, true);
    return r;
}

// --- GMM ---------------------------------------------------------------------

Tensor<double> GmmModel::project(const Tensor<double>& points) const {
    if (pca_basis.empty()) {
        if (points.cols() != dim) throw ConfigError("gmm: point dimension mismatch");
        return points;
    }
    const std::size_t e = pca_mean.size();
    if (points.cols() != e) throw ConfigError("gmm: point dimension mismatch");
    Tensor<double> out({points.rows(), dim});
    for (std::size_t i = 0; i < points.rows(); ++i) {
        for (std::size_t p = 0; p < dim; ++p) {
            double s = 0.0;
            for (std::size_t k = 0; k < e; ++k) s += (points(i, k) - pca_mean[k]) * pca_basis(k, p);
            out(i, p) = s;
        }
    }
    return out;
}

namespace {

// log N(x | mean, diag var) for every (point, component), plus log weight.
void weighted_log_densities(const Tensor<double>& x, const GmmModel& g, Tensor<double>& out) {
    const std::size_t n = x.rows(), k = g.k, d = g.dim;
    const double log2pi = std::log(2.0 * std::numbers::pi);
    std::vector<double> norm(k);
    for (std::size_t c = 0; c < k; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < d; ++p) s += std::log(g.variances(c, p));
        norm[c] = std::log(g.weights[c]) - 0.5 * (static_cast<double>(d) * log2pi + s);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            double q = 0.0;
            for (std::size_t p = 0; p < d; ++p) {
                const double diff = x(i, p) - g.means(c, p);
                q += diff * diff / g.variances(c, p);
            }
            out(i, c) = norm[c] - 0.5 * q;
        }
    }
}

// Converts log densities to responsibilities in place; returns mean log-likelihood.
double normalize_responsibilities(Tensor<double>& r) {
    const std::size_t n = r.rows(), k = r.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, r(i, c));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(r(i, c) - mx);
        const double lse = mx + std::log(z);
        total += lse;
        for (std::size_t c = 0; c < k; ++c) r(i, c) = std::exp(r(i, c) - lse);
    }
    return total / static_cast<double>(n);
}

double sq_dist(const Tensor<double>& x, std::size_t i, const Tensor<double>& m, std::size_t c) {
    double s = 0.0;
    for (std::size_t p = 0; p < x.cols(); ++p) {
        const double diff = x(i, p) - m(c, p);
        s += diff * diff;
    }
    return s;
}

void m_step(const Tensor<double>& x, const Tensor<double>& r, GmmModel& g, double floor,
            std::vector<double>* mass_out) {
    const std::size_t n = x.rows(), k = g.k, d = g.dim;
    std::vector<double> mass(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) mass[c] += r(i, c);
    }
    g.means.fill(0.0);
    g.variances.fill(0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            const double w = r(i, c);
            for (std::size_t p = 0; p < d; ++p) g.means(c, p) += w * x(i, p);
        }
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (mass[c] <= 0.0) continue;
        for (std::size_t p = 0; p < d; ++p) g.means(c, p) /= mass[c];
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            const double w = r(i, c);
            for (std::size_t p = 0; p < d; ++p) {
                const double diff = x(i, p) - g.means(c, p);
                g.variances(c, p) += w * diff * diff;
            }
        }
    }
    for (std::size_t c = 0; c < k; ++c) {
        g.weights[c] = mass[c] / static_cast<double>(n);
        for (std::size_t p = 0; p < d; ++p) {
            const double v = mass[c] > 0.0 ? g.variances(c, p) / mass[c] : floor;
            g.variances(c, p) = std::max(v, floor);
        }
    }
    if (mass_out) *mass_out = std::move(mass);
}

GmmModel em_from_seed(const Tensor<double>& x, const GmmOptions& opt, std::size_t k, std::uint64_t seed) {
    const std::size_t n = x.rows(), d = x.cols();
    GmmModel g;
    g.k = k;
    g.dim = d;
    g.weights.assign(k, 1.0 / static_cast<double>(k));
    g.means = Tensor<double>({k, d});
    g.variances = Tensor<double>({k, d});

    // Greedy k-means++ seeding: each step draws 2 + floor(ln k) D^2-weighted
    // candidates and keeps the one that lowers the total potential most.
    Rng rng(Rng::derive(seed, 0x676D6D));
    const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
    auto point_dist = [&](std::size_t i, std::size_t j) {
        double s2 = 0.0;
        for (std::size_t p = 0; p < d; ++p) {
            const double diff = x(i, p) - x(j, p);
            s2 += diff * diff;
        }
        return s2;
    };
    std::vector<std::size_t> centers{static_cast<std::size_t>(rng.below(n))};
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t idx = centers[c];
        for (std::size_t p = 0; p < d; ++p) g.means(c, p) = x(idx, p);
        if (c + 1 == k) break;
        std::vector<double> cum(n);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            best[i] = std::min(best[i], sq_dist(x, i, g.means, c));
            cum[i] = (acc += best[i]);
        }
        if (!(acc > 0.0)) {
            centers.push_back(static_cast<std::size_t>(rng.below(n)));
            continue;
        }
        std::size_t pick = 0;
        double pick_potential = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < trials; ++t) {
            const std::size_t cand = rng.categorical(cum);
            double potential = 0.0;
            for (std::size_t i = 0; i < n; ++i) potential += std::min(best[i], point_dist(i, cand));
            if (potential < pick_potential) {
                pick_potential = potential;
                pick = cand;
            }
        }
        centers.push_back(pick);
    }
    // Hard assignment to the nearest seed gives the first M-step.
    Tensor<double> r({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t arg = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            const double dist = sq_dist(x, i, g.means, c);
            if (dist < bd) {
                bd = dist;
                arg = c;
            }
        }
        r(i, arg) = 1.0;
    }
    Tensor<double> seed_means = g.means;
    std::vector<double> mass;
    m_step(x, r, g, opt.variance_floor, &mass);
    for (std::size_t c = 0; c < k; ++c) {
        if (mass[c] <= 0.0) {
            for (std::size_t p = 0; p < d; ++p) g.means(c, p) = seed_means(c, p);
            g.weights[c] = 1.0 / static_cast<double>(n);
        }
    }
    double wsum = 0.0;
    for (double w : g.weights) wsum += w;
    for (double& w : g.weights) w /= wsum;

    double prev = -std::numeric_limits<double>::infinity();
    struct {
        Tensor<double> means, variances;
        std::vector<double> weights;
    } last;
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        weighted_log_densities(x, g, r);
        const double ll = normalize_responsibilities(r);
        if (ll < prev) {
            // Rounding at the fixed point; keep the better parameters.
            g.means = std::move(last.means);
            g.variances = std::move(last.variances);
            g.weights = std::move(last.weights);
            break;
        }
        g.history.push_back(ll);
        if (it > 0 && ll - prev < opt.tolerance) {
            prev = ll;
            break;
        }
        prev = ll;
        last.means = g.means;
        last.variances = g.variances;
        last.weights = g.weights;
        m_step(x, r, g, opt.variance_floor, &mass);
        // Components with no responsibility mass restart at the point farthest
        // from every current mean.
        bool reseeded = false;
        for (std::size_t c = 0; c < k; ++c) {
            if (mass[c] > 1e-12) continue;
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                double nearest = std::numeric_limits<double>::infinity();
                for (std::size_t o = 0; o < k; ++o) {
                    if (o != c) nearest = std::min(nearest, sq_dist(x, i, g.means, o));
                }
                if (nearest > far_d) {
                    far_d = nearest;
                    far = i;
                }
            }
            for (std::size_t p = 0; p < d; ++p) {
                g.means(c, p) = x(far, p);
                g.variances(c, p) = std::max(opt.variance_floor, far_d / static_cast<double>(d));
            }
            g.weights[c] = 1.0 / static_cast<double>(n);
            g.events.push_back("iteration " + std::to_string(it) + ": component " + std::to_string(c) +
                               " had no mass; re-seeded from point " + std::to_string(far));
            reseeded = true;
        }
        if (reseeded) {
            double s = 0.0;
            for (double w : g.weights) s += w;
            for (double& w : g.weights) w /= s;
            prev = -std::numeric_limits<double>::infinity();
        }
    }
    g.log_likelihood = prev;
    return g;
}

}  // namespace

GmmModel fit_gmm(const Tensor<double>& points, const GmmOptions& opt) {
    const std::size_t n = points.rows(), e = points.cols();
    const std::size_t k = opt.components;
    if (k == 0) throw ConfigError("fit_gmm: component count must be >= 1");
    if (n < 2 * k) {
        throw ConfigError("fit_gmm: need at least " + std::to_string(2 * k) + " points, have " + std::to_string(n));
    }
    if (!(opt.variance_floor > 0.0)) throw ConfigError("fit_gmm: variance floor must be positive");

    Tensor<double> pca_mean, pca_basis;
    Tensor<double> x = points;
    if (opt.pca) {
        const std::size_t p = std::min(e, opt.pca_max_dims);
        Eigen::MatrixXd m(n, e);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k2 = 0; k2 < e; ++k2) m(i, k2) = points(i, k2);
        }
        const Eigen::RowVectorXd mu = m.colwise().mean();
        const Eigen::MatrixXd centered = m.rowwise() - mu;
        const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
        if (solver.info() != Eigen::Success) throw NumericError("fit_gmm: PCA eigendecomposition failed");
        pca_mean = Tensor<double>({e});
        pca_basis = Tensor<double>({e, p});
        for (std::size_t k2 = 0; k2 < e; ++k2) pca_mean[k2] = mu(k2);
        // Eigenvalues ascend; take the last p columns, largest first, with a
        // sign fixed so the largest-magnitude entry is positive.
        for (std::size_t c = 0; c < p; ++c) {
            Eigen::VectorXd v = solver.eigenvectors().col(static_cast<Eigen::Index>(e - 1 - c));
            Eigen::Index arg = 0;
            v.cwiseAbs().maxCoeff(&arg);
            if (v(arg) < 0) v = -v;
            for (std::size_t k2 = 0; k2 < e; ++k2) pca_basis(k2, c) = v(static_cast<Eigen::Index>(k2));
        }
        GmmModel proj;
        proj.dim = p;
        proj.pca_mean = pca_mean;
        proj.pca_basis = pca_basis;
        x = proj.project(points);
    }

    GmmModel best;
    const std::size_t starts = std::max<std::size_t>(1, opt.restarts);
    for (std::size_t s = 0; s < starts; ++s) {
        auto g = em_from_seed(x, opt, k, Rng::derive(opt.seed, s));
        g.restart = s;
        if (s == 0 || g.log_likelihood > best.log_likelihood) best = std::move(g);
    }
    best.pca_mean = std::move(pca_mean);
    best.pca_basis = std::move(pca_basis);
    return best;
}

GmmModel fit_gmm(std::span<const EmbeddingSet> training_sets, const GmmOptions& options) {
    if (training_sets.empty()) throw ConfigError("fit_gmm: no training sets");
    std::size_t n = 0;
    const std::size_t e = training_sets.front().dim();
    for (const auto& s : training_sets) {
        if (s.dim() != e) throw ConfigError("fit_gmm: embedding dimension mismatch for " + s.domain);
        n += s.size();
    }
    Tensor<double> pts({n, e});
    std::size_t r = 0;
    for (const auto& s : training_sets) {
        for (std::size_t i = 0; i < s.size(); ++i, ++r) {
            std::copy(s.rows.row(i).begin(), s.rows.row(i).end(), pts.row(r).begin());
        }
    }
    auto opt = options;
    if (opt.components == 0) opt.components = training_sets.size();
    return fit_gmm(pts, opt);
}

Tensor<double> GmmModel::responsibilities(const Tensor<double>& points) const {
    const auto x = project(points);
    Tensor<double> r({x.rows(), k});
    weighted_log_densities(x, *this, r);
    normalize_responsibilities(r);
    return r;
}

std::vector<std::size_t> GmmModel::assign(const Tensor<double>& points) const {
    const auto x = project(points);
    Tensor<double> r({x.rows(), k});
    weighted_log_densities(x, *this, r);
    std::vector<std::size_t> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (r(i, c) > r(i, arg)) arg = c;
        }
        out[i] = arg;
    }
    return out;
}

namespace {

Tensor<float> to_f32(const Tensor<double>& t) { return t.cast<float>(); }

}  // namespace

std::vector<std::byte> encode_gmm(const GmmModel& g) {
    nlohmann::ordered_json h;
    h["kind"] = "gmm";
    h["k"] = g.k;
    h["dim"] = g.dim;
    h["log_likelihood"] = g.log_likelihood;
    h["history"] = g.history;
    h["events"] = g.events;
    h["restart"] = g.restart;
    h["pca"] = !g.pca_basis.empty();
    ParamSet t;
    t.push_back({"weights", Tensor<float>({g.k}, std::vector<float>(g.weights.begin(), g.weights.end()))});
    t.push_back({"means", to_f32(g.means)});
    t.push_back({"variances", to_f32(g.variances)});
    if (!g.pca_basis.empty()) {
        t.push_back({"pca.mean", to_f32(g.pca_mean)});
        t.push_back({"pca.basis", to_f32(g.pca_basis)});
    }
    return encode_tensor_file(kGmmMagic, h, t);
}

GmmModel decode_gmm(std::span<const std::byte> bytes) {
    auto file = decode_tensor_file(kGmmMagic, bytes);
    GmmModel g;
    try {
        g.k = file.header.at("k").get<std::size_t>();
        g.dim = file.header.at("dim").get<std::size_t>();
        g.log_likelihood = file.header.at("log_likelihood").get<double>();
        g.history = file.header.at("history").get<std::vector<double>>();
        g.events = file.header.at("events").get<std::vector<std::string>>();
        g.restart = file.header.at("restart").get<std::size_t>();
        const auto w = find_param(file.tensors, "weights").cast<double>();
        g.weights.assign(w.vec().begin(), w.vec().end());
        g.means = find_param(file.tensors, "means").cast<double>();
        g.variances = find_param(file.tensors, "variances").cast<double>();
        if (file.header.at("pca").get<bool>()) {
            g.pca_mean = find_param(file.tensors, "pca.mean").cast<double>();
            g.pca_basis = find_param(file.tensors, "pca.basis").cast<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("gmm header: ") + e.what());
    } catch (const CompatibilityError& e) {
        throw FormatError(std::string("gmm file: ") + e.what());
    }
    if (g.weights.size() != g.k || g.means.shape() != Shape{g.k, g.dim} || g.variances.shape() != Shape{g.k, g.dim}) {
        throw FormatError("gmm file: tensor shapes disagree with header");
    }
    return g;
}

void save_gmm(const GmmModel& gmm, const std::filesystem::path& path) { io::write_file_atomic(path, encode_gmm(gmm)); }

GmmModel load_gmm(const std::filesystem::path& path) { return decode_gmm(io::read_file(path)); }

std::map<std::string, std::size_t> map_domains_to_clusters(const GmmModel& gmm,
                                                           std::span<const EmbeddingSet> training_sets) {
    std::map<std::string, std::size_t> out;
    for (const auto& s : training_sets) {
        const auto labels = gmm.assign(s.rows);
        std::vector<std::size_t> votes(gmm.k, 0);
        for (auto l : labels) ++votes[l];
        out[s.domain] = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
    return out;
}

SelectionResult cluster_select(const GmmModel& gmm, const std::map<std::string, std::size_t>& domain_clusters,
                               const EmbeddingSet& novel, double mass_threshold, std::size_t max_adapters) {
    if (domain_clusters.empty()) throw ConfigError("cluster_select: no domain-to-cluster mapping");
    if (max_adapters == 0) throw ConfigError("cluster_select: max_adapters must be >= 1");
    if (novel.size() == 0) throw ConfigError("cluster_select: empty novel embedding set");
    const auto labels = gmm.assign(novel.rows);
    std::vector<double> mass(gmm.k, 0.0);
    for (auto l : labels) mass[l] += 1.0 / static_cast<double>(labels.size());

    SelectionResult r;
    r.method = "cluster";
    r.threshold = mass_threshold;
    r.max_adapters = max_adapters;
    std::vector<bool> mapped(gmm.k, false);
    for (const auto& [domain, cluster] : domain_clusters) {
        if (cluster >= gmm.k) throw ConfigError("cluster_select: domain " + domain + " maps to unknown component");
        mapped[cluster] = true;
        r.ranked.push_back({domain, mass[cluster]});
    }
    double unmapped = 0.0;
    nlohmann::ordered_json unmapped_clusters = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < gmm.k; ++c) {
        if (!mapped[c] && mass[c] > 0.0) {
            unmapped += mass[c];
            unmapped_clusters.push_back({{"component", c}, {"mass", mass[c]}});
        }
    }
    rank(r.ranked);
    choose(r, false);
    r.details["unmapped_mass"] = unmapped;
    r.details["unmapped_components"] = unmapped_clusters;
    r.details["cluster_mass"] = mass;
    return r;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

std::vector<SoupRecipe> exhaustive_combos(std::vector<std::string> ids, std::size_t size) {
    if (size == 0) throw ConfigError("exhaustive_combos: size must be >= 1");
    if (size > ids.size()) {
        throw ConfigError("exhaustive_combos: size " + std::to_string(size) + " exceeds " + std::to_string(ids.size()) +
                          " candidates");
    }
    std::sort(ids.begin(), ids.end());
    std::vector<SoupRecipe> out;
    out.reserve(binomial(ids.size(), size));
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    const std::size_t n = ids.size();
    for (;;) {
        std::vector<std::string> pick;
        for (auto i : idx) pick.push_back(ids[i]);
        out.push_back(uniform_recipe(std::move(pick), "exhaustive"));
        std::size_t pos = size;
        while (pos > 0 && idx[pos - 1] == n - size + pos - 1) --pos;
        if (pos == 0) break;
        ++idx[pos - 1];
        for (std::size_t j = pos; j < size; ++j) idx[j] = idx[j - 1] + 1;
    }
    return out;
}

}  // namespace soup
