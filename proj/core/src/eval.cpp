#include "cloak/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "cloak/errors.hpp"
#include "cloak/io.hpp"
#include "cloak/log.hpp"

namespace cloak {

void EmbedderConfig::validate() const {
    if (embed_dim < 1 || width < 1 || steps < 0 || batch < 1 || !(lr > 0.0) || !(noise_augment >= 0.0))
        throw ConfigError("embedder config needs positive sizes, steps >= 0, lr > 0");
    if (!(min_accuracy >= 0.0 && min_accuracy <= 1.0)) throw ConfigError("embedder min_accuracy must lie in [0, 1]");
}

Embedder::Embedder(int image_size, std::vector<int> classes, const EmbedderConfig& config, std::uint64_t seed)
    : image_size_(image_size), classes_(std::move(classes)) {
    config.validate();
    if (image_size % 4 != 0) throw ConfigError("embedder image size must be divisible by 4");
    if (classes_.size() < 2) throw ArgumentError("embedder needs at least two identities");
    Rng rng(derive_seed(seed, 0xE3B));
    const int w = config.width, q = image_size / 4;
    params_.add("c1.w", init_fan_in({w, kImageChannels, 3, 3}, kImageChannels * 9, rng));
    params_.add("c1.b", Tensor({w}));
    params_.add("c2.w", init_fan_in({2 * w, w, 3, 3}, w * 9, rng));
    params_.add("c2.b", Tensor({2 * w}));
    params_.add("emb.w", init_fan_in({config.embed_dim, 2 * w * q * q}, 2 * w * q * q, rng));
    params_.add("emb.b", Tensor({config.embed_dim}));
    params_.add("head.w", init_fan_in({static_cast<int>(classes_.size()), config.embed_dim}, config.embed_dim, rng));
    params_.add("head.b", Tensor({static_cast<int>(classes_.size())}));
}

int Embedder::class_index(int label) const {
    const auto it = std::find(classes_.begin(), classes_.end(), label);
    return it == classes_.end() ? -1 : static_cast<int>(it - classes_.begin());
}

ag::Var Embedder::forward_logits(const ag::Var& x, ag::Var* embedding) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.dim(2) != image_size_ || xv.dim(3) != image_size_)
        throw ArgumentError("embedder expects [N, 3, " + std::to_string(image_size_) + ", " +
                            std::to_string(image_size_) + "], got " + shape_str(xv.shape()));
    const int N = xv.dim(0);
    ag::Var h = ag::silu(ag::conv2d(x, params_.get("c1.w"), params_.get("c1.b"), 1, 1));
    h = ag::avg_pool2(h);
    h = ag::silu(ag::conv2d(h, params_.get("c2.w"), params_.get("c2.b"), 1, 1));
    h = ag::avg_pool2(h);
    h = ag::reshape(h, {N, static_cast<int>(h.value().numel() / N)});
    const ag::Var e = ag::linear(h, params_.get("emb.w"), params_.get("emb.b"));
    if (embedding) *embedding = e;
    return ag::linear(e, params_.get("head.w"), params_.get("head.b"));
}

Tensor Embedder::embed(const Tensor& pixels) const {
    ag::NoGradGuard guard;
    ag::Var e;
    forward_logits(ag::constant(pixels), &e);
    return e.value();
}

Tensor Embedder::logits(const Tensor& pixels) const {
    ag::NoGradGuard guard;
    return forward_logits(ag::constant(pixels)).value();
}

Tensor Embedder::probabilities(const Tensor& pixels) const {
    Tensor p = logits(pixels);
    const int N = p.dim(0), K = p.dim(1);
    for (int n = 0; n < N; ++n) {
        double* row = p.data() + static_cast<std::size_t>(n) * K;
        const double m = *std::max_element(row, row + K);
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += (row[k] = std::exp(row[k] - m));
        for (int k = 0; k < K; ++k) row[k] /= z;
    }
    return p;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

namespace {

std::span<const double> row_of(const Tensor& t, int i) {
    const std::size_t w = t.numel() / t.dim(0);
    return {t.data() + i * w, w};
}

}  // namespace

double loo_accuracy(const Embedder& embedder, const ImageBatch& batch) {
    const int N = batch.size();
    if (N < 2) throw ArgumentError("leave-one-out accuracy needs at least two images");
    const Tensor e = embedder.embed(batch.pixels);
    int correct = 0;
    for (int i = 0; i < N; ++i) {
        int best = -1;
        double best_sim = -2.0;
        for (int j = 0; j < N; ++j) {
            if (j == i) continue;
            const double s = cosine(row_of(e, i), row_of(e, j));
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        correct += batch.labels[best] == batch.labels[i];
    }
    return static_cast<double>(correct) / N;
}

Embedder train_identity_embedder(const ImageBatch& train, const ImageBatch& holdout, const EmbedderConfig& config,
                                 std::uint64_t seed) {
    config.validate();
    std::vector<int> classes = train.labels;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    Embedder emb(train.image_size(), classes, config, seed);
    std::vector<int> targets(train.size());
    for (int i = 0; i < train.size(); ++i) targets[i] = emb.class_index(train.labels[i]);

    Adam opt(emb.params().vars(), config.lr);
    const int N = train.size();
    const std::size_t per = train.pixels.numel() / N;
    for (int step = 0; step < config.steps; ++step) {
        Rng rng(derive_seed(seed, 0xE7, step));
        const int b = std::min(config.batch, N);
        Shape shape = train.pixels.shape();
        shape[0] = b;
        Tensor x(shape);
        std::vector<int> y(b);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int i = 0; i < b; ++i) {
            const int k = uniform_int(rng, 0, N);
            const double sigma = std::uniform_real_distribution<double>(0.0, config.noise_augment)(rng);
            for (std::size_t j = 0; j < per; ++j)
                x[i * per + j] = std::clamp(train.pixels[k * per + j] + sigma * gauss(rng), -1.0, 1.0);
            y[i] = targets[k];
        }
        opt.zero_grad();
        const ag::Var loss = ag::cross_entropy(emb.forward_logits(ag::constant(std::move(x))), y);
        if (!std::isfinite(loss.item())) throw TrainingError("embedder: non-finite loss at step " + std::to_string(step));
        ag::backward(loss);
        opt.step();
    }
    emb.params().zero_grad();
    emb.params().set_trainable(false);
    emb.loo_accuracy = loo_accuracy(emb, holdout);
    if (emb.loo_accuracy < config.min_accuracy)
        throw TrainingError("embedder leave-one-out accuracy " + format_double(emb.loo_accuracy) + " below " +
                            format_double(config.min_accuracy));
    return emb;
}

std::vector<double> mean_embedding(const Embedder& embedder, const Tensor& pixels) {
    const Tensor e = embedder.embed(pixels);
    const int N = e.dim(0), E = e.dim(1);
    std::vector<double> m(E, 0.0);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < E; ++k) m[k] += e[static_cast<std::size_t>(n) * E + k] / N;
    return m;
}

double ism_proxy(const ImageBatch& generated, const ImageBatch& identity_clean, const Embedder& embedder) {
    if (generated.size() < 1 || identity_clean.size() < 1) throw ArgumentError("ism_proxy: empty batch");
    const std::vector<double> ref = mean_embedding(embedder, identity_clean.pixels);
    const Tensor e = embedder.embed(generated.pixels);
    double s = 0.0;
    for (int i = 0; i < generated.size(); ++i) s += cosine(row_of(e, i), ref);
    return s / generated.size();
}

double fdfr_proxy(const ImageBatch& generated, const Embedder& embedder, double tau) {
    if (generated.size() < 1) throw ArgumentError("fdfr_proxy: empty batch");
    const Tensor p = embedder.probabilities(generated.pixels);
    int failed = 0;
    for (int i = 0; i < generated.size(); ++i) {
        const auto r = row_of(p, i);
        failed += *std::max_element(r.begin(), r.end()) < tau;
    }
    return static_cast<double>(failed) / generated.size();
}

namespace {

using Mat = Eigen::MatrixXd;

Mat to_matrix(const Tensor& f) {
    Mat m(f.dim(0), f.dim(1));
    for (int i = 0; i < f.dim(0); ++i)
        for (int j = 0; j < f.dim(1); ++j) m(i, j) = f[static_cast<std::size_t>(i) * f.dim(1) + j];
    return m;
}

Mat covariance(const Mat& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Mat c = x.rowwise() - mu;
    return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

bool near_singular(const Mat& c) {
    Eigen::SelfAdjointEigenSolver<Mat> es(c);
    const double hi = std::max(es.eigenvalues().maxCoeff(), 1.0);
    return es.eigenvalues().minCoeff() < 1e-10 * hi;
}

Mat sqrt_psd(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double trace_sqrt(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace

double frechet_distance(const Tensor& fa, const Tensor& fb, bool* jittered) {
    if (fa.rank() != 2 || fb.rank() != 2 || fa.dim(1) != fb.dim(1)) throw ArgumentError("frechet: feature shape mismatch");
    if (fa.dim(0) < 2 || fb.dim(0) < 2) throw ArgumentError("frechet: need at least two samples per set");
    const Mat a = to_matrix(fa), b = to_matrix(fb);
    Mat ca = covariance(a), cb = covariance(b);
    const bool jitter = near_singular(ca) || near_singular(cb);
    if (jitter) {
        ca.diagonal().array() += 1e-6;
        cb.diagonal().array() += 1e-6;
    }
    if (jittered) *jittered = jitter;
    const double mean_term = (a.colwise().mean() - b.colwise().mean()).squaredNorm();
    // tr sqrt(ca cb) computed symmetrically from both sides.
    const Mat sa = sqrt_psd(ca), sb = sqrt_psd(cb);
    const double cross = 0.5 * (trace_sqrt(sa * cb * sa) + trace_sqrt(sb * ca * sb));
    return std::max(0.0, mean_term + ca.trace() + cb.trace() - 2.0 * cross);
}

double feature_fid(const ImageBatch& a, const ImageBatch& b, const Embedder& embedder, bool* jittered) {
    if (a.size() < 2 || b.size() < 2) throw ArgumentError("feature_fid: need at least two samples per batch");
    return frechet_distance(embedder.embed(a.pixels), embedder.embed(b.pixels), jittered);
}

MetricsReport evaluate_generations(const Denoiser& unet, const NoiseSchedule& schedule,
                                   const std::map<std::string, PromptEmbedding>& prompts,
                                   const ImageBatch& identity_clean, const Embedder& embedder,
                                   const SamplingConfig& sampling, double tau, int image_size,
                                   std::map<std::string, ImageBatch>* samples) {
    if (prompts.empty()) throw ArgumentError("evaluate_generations: no prompts");
    MetricsReport r;
    for (const auto& [text, emb] : prompts) {
        const ImageBatch gen = sample_ddim(unet, schedule, emb, sampling.ddim_steps, sampling.count, sampling.seed, image_size);
        PromptMetrics m;
        m.ism = ism_proxy(gen, identity_clean, embedder);
        m.fdfr = fdfr_proxy(gen, embedder, tau);
        m.fid = identity_clean.size() >= 2 ? feature_fid(gen, identity_clean, embedder, &m.fid_jittered) : 0.0;
        r.ism_proxy += m.ism / prompts.size();
        r.fdfr_proxy += m.fdfr / prompts.size();
        r.feature_fid += m.fid / prompts.size();
        r.per_prompt[text] = m;
        if (samples) (*samples)[text] = gen;
    }
    return r;
}

Tensor minmax_normalize(const Tensor& field, bool* degenerate) {
    const auto [lo, hi] = std::minmax_element(field.values().begin(), field.values().end());
    Tensor out(field.shape());
    const bool flat = field.empty() || !(*hi - *lo > 1e-12 * std::max(1.0, std::abs(*hi)));
    if (degenerate) *degenerate = flat;
    if (flat) return out;
    for (std::size_t i = 0; i < field.numel(); ++i) out[i] = (field[i] - *lo) / (*hi - *lo);
    return out;
}

namespace {

Tensor upsample_to(const Tensor& m, int r, int size) {
    Tensor out({size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            out[static_cast<std::size_t>(y) * size + x] = m[static_cast<std::size_t>(y * r / size) * r + x * r / size];
    return out;
}

}  // namespace

Heatmaps attention_heatmap(const NoisePredictor& unet, const NoiseSchedule& schedule, const Tensor& image,
                           const PromptEmbedding& prompt, const std::vector<int>& keyword_positions, int t,
                           int resolution, std::uint64_t seed) {
    Tensor x0 = image;
    if (x0.rank() == 3) x0 = x0.reshaped({1, x0.dim(0), x0.dim(1), x0.dim(2)});
    if (x0.rank() != 4 || x0.dim(0) != 1) throw ArgumentError("attention_heatmap expects a single image");
    const int size = x0.dim(2);
    NoisePredictor probe = unet.clone();
    probe.set_capture(CaptureSet::all);
    Rng rng(derive_seed(seed, 0x4EA7));
    const Tensor eps = randn(x0.shape(), rng);
    const Tensor xt = q_sample(x0, t, eps, schedule);
    Prediction pred;
    {
        ag::NoGradGuard guard;
        pred = probe.predict(ag::constant(xt), t, ag::constant(prompt.matrix), true);
    }
    const AttentionRecord* cross = nullptr;
    const AttentionRecord* self = nullptr;
    for (const auto& e : pred.trace.entries) {
        if (e.resolution != resolution) continue;
        if (e.kind == AttentionKind::cross && !cross) cross = &e;
        if (e.kind == AttentionKind::self && !self) self = &e;
    }
    if (!cross || !self)
        throw ArgumentError("no attention layer at resolution " + std::to_string(resolution));
    const int P = resolution * resolution;
    const int L = cross->probs.dim(2);
    Tensor cmap({resolution, resolution});
    for (int p = 0; p < P; ++p)
        for (int k : keyword_positions) {
            if (k < 0 || k >= L) throw ArgumentError("keyword position outside the prompt");
            cmap[p] += cross->probs[static_cast<std::size_t>(p) * L + k];
        }
    Tensor smap({resolution, resolution});
    for (int q = 0; q < P; ++q)
        for (int p = 0; p < P; ++p) smap[p] += self->probs[static_cast<std::size_t>(q) * P + p] / P;
    Heatmaps h;
    h.cross = upsample_to(minmax_normalize(cmap, &h.cross_degenerate), resolution, size);
    h.self = upsample_to(minmax_normalize(smap, &h.self_degenerate), resolution, size);
    h.cross_module = cross->module_id;
    h.self_module = self->module_id;
    if (h.cross_degenerate) log_warn("constant cross-attention heatmap in " + h.cross_module);
    if (h.self_degenerate) log_warn("constant self-attention heatmap in " + h.self_module);
    return h;
}

double variance(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / (xs.size() - 1);
}

DynamicsSummary dynamics_report(const RunLog& log, double alpha2) {
    if (log.rows.empty()) throw ArgumentError("dynamics_report: run log has no iterations");
    DynamicsSummary s;
    s.iterations = static_cast<int>(log.rows.size());
    auto mean_of = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    };
    for (const auto& r : log.rows) {
        s.total_loss.push_back(r.l_cond + alpha2 * r.l_a);
        s.cond_score.push_back(mean_of(r.cond_scores));
        s.attn_score.push_back(mean_of(r.attn_scores));
    }
    const int tail = std::max(1, s.iterations / 10);
    s.final_loss = std::accumulate(s.total_loss.end() - tail, s.total_loss.end(), 0.0) / tail;
    std::vector<double> inc;
    for (std::size_t i = 1; i < s.total_loss.size(); ++i) inc.push_back(s.total_loss[i] - s.total_loss[i - 1]);
    s.increment_variance = variance(inc);
    s.score_variance = variance(s.cond_score);
    s.attn_score_variance = variance(s.attn_score);
    return s;
}

namespace {

struct Canvas {
    int w, h;
    std::vector<std::array<double, 3>> px;
    Canvas(int w_, int h_) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_, {1.0, 1.0, 1.0}) {}
    void set(int x, int y, const std::array<double, 3>& c) {
        if (x >= 0 && x < w && y >= 0 && y < h) px[static_cast<std::size_t>(y) * w + x] = c;
    }
    void line(int x0, int y0, int x1, int y1, const std::array<double, 3>& c) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }
    Tensor tensor() const {
        Tensor t({3, h, w});
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < w * h; ++i) t[static_cast<std::size_t>(c) * w * h + i] = px[i][c] * 2.0 - 1.0;
        return t;
    }
};

constexpr std::array<double, 3> kPalette[] = {{0.85, 0.1, 0.1}, {0.1, 0.3, 0.85}, {0.1, 0.6, 0.2}, {0.6, 0.3, 0.7}};

void plot_panel(Canvas& cv, int top, int height, const std::vector<std::vector<double>>& series) {
    const int left = 8, right = cv.w - 8, bottom = top + height;
    double lo = 1e300, hi = -1e300;
    std::size_t n = 1;
    for (const auto& s : series)
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            n = std::max(n, s.size());
        }
    if (!(hi > lo)) hi = lo + 1.0;
    const std::array<double, 3> axis{0.3, 0.3, 0.3};
    cv.line(left, bottom, right, bottom, axis);
    cv.line(left, top, left, bottom, axis);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        for (std::size_t i = 1; i < s.size(); ++i) {
            auto px = [&](std::size_t j) { return left + static_cast<int>((right - left) * j / std::max<std::size_t>(1, n - 1)); };
            auto py = [&](double v) { return bottom - static_cast<int>((bottom - top) * (v - lo) / (hi - lo)); };
            cv.line(px(i - 1), py(s[i - 1]), px(i), py(s[i]), kPalette[k % 4]);
        }
    }
}

}  // namespace

void plot_dynamics(const std::filesystem::path& path, const std::vector<std::pair<std::string, DynamicsSummary>>& runs,
                   const std::string& config_hash) {
    static const char* kColorNames[4] = {"red", "blue", "green", "purple"};
    Canvas cv(640, 420);
    std::vector<std::vector<double>> losses, scores;
    std::string legend;
    for (const auto& [label, s] : runs) {
        if (!legend.empty()) legend += "; ";
        legend += label + "=" + kColorNames[losses.size() % 4];
        losses.push_back(s.total_loss);
        scores.push_back(s.cond_score);
    }
    plot_panel(cv, 10, 190, losses);
    plot_panel(cv, 220, 190, scores);
    write_png(path, cv.tensor(),
              {{"config_hash", config_hash}, {"legend", legend}, {"panels", "top: total loss; bottom: gradient score"}});
}

}  // namespace cloak
