#include "dubalign/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace dubalign::num {

namespace {

void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

std::string shape_str(const Mat& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void AdamConfig::validate() const {
    if (!(lr > 0.0)) throw InvalidInput("adam: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw InvalidInput("adam: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidInput("adam: beta2 must be in [0,1)");
    if (!(eps > 0.0)) throw InvalidInput("adam: eps must be > 0");
}

Mat& ParamStore::create(const std::string& name, Index rows, Index cols) {
    if (entries_.count(name)) throw Error("parameter already registered: " + name);
    ParamEntry& e = entries_[name];
    e.value = Mat::Zero(rows, cols);
    e.grad = Mat::Zero(rows, cols);
    e.adam_m = Mat::Zero(rows, cols);
    e.adam_v = Mat::Zero(rows, cols);
    return e.value;
}

Mat& ParamStore::create(const std::string& name, const Mat& init) {
    Mat& v = create(name, init.rows(), init.cols());
    v = init;
    return v;
}

ParamEntry& ParamStore::entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter: " + name);
    return it->second;
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter: " + name);
    return it->second;
}

Mat& ParamStore::value(const std::string& name) { return entry(name).value; }
const Mat& ParamStore::value(const std::string& name) const { return entry(name).value; }
Mat& ParamStore::grad(const std::string& name) { return entry(name).grad; }
const Mat& ParamStore::grad(const std::string& name) const { return entry(name).grad; }

void ParamStore::zero_grads() {
    for (auto& [name, e] : entries_) e.grad.setZero();
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
}

AdamStatus adam_step(ParamStore& store, const AdamConfig& cfg) {
    cfg.validate();
    bool any = false;
    for (const auto& [name, e] : store.entries()) {
        if (e.grad.size() > 0 && !e.grad.isZero(0.0)) {
            any = true;
            break;
        }
    }
    if (!any) return AdamStatus::skipped_empty_grads;

    const long t = store.step_count() + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& [name, e] : store.entries()) {
        e.adam_m = cfg.beta1 * e.adam_m + (1.0 - cfg.beta1) * e.grad;
        e.adam_v.array() = cfg.beta2 * e.adam_v.array() + (1.0 - cfg.beta2) * e.grad.array().square();
        Mat mhat = e.adam_m / bc1;
        Mat vhat = e.adam_v / bc2;
        e.value.array() -= cfg.lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
        e.grad.setZero();
    }
    store.set_step_count(t);
    return AdamStatus::applied;
}

Mat gaussian_init(Index rows, Index cols, double stddev, Rng& rng) {
    Mat m(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = stddev * rng.gaussian();
    return m;
}

Mat softmax_over_slots(const Mat& logits) {
    if (!logits.allFinite()) throw InvalidInput("softmax_over_slots: non-finite logits");
    Mat y(logits.rows(), logits.cols());
    for (Index n = 0; n < logits.cols(); ++n) {
        const double mx = logits.col(n).maxCoeff();
        Eigen::ArrayXd e = (logits.col(n).array() - mx).exp();
        y.col(n) = e / e.sum();
    }
    return y;
}

Mat softmax_over_slots_backward(const Mat& dy, const Mat& y) {
    require_shape(dy.rows() == y.rows() && dy.cols() == y.cols(),
                  "softmax_over_slots_backward: grad shape " + shape_str(dy) +
                      " vs output " + shape_str(y));
    Mat dx(y.rows(), y.cols());
    for (Index n = 0; n < y.cols(); ++n) {
        const double dot = y.col(n).dot(dy.col(n));
        dx.col(n) = y.col(n).array() * (dy.col(n).array() - dot);
    }
    return dx;
}

Mat softmax_rows(const Mat& logits) {
    if (!logits.allFinite()) throw InvalidInput("softmax_rows: non-finite logits");
    Mat y(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        Eigen::ArrayXd e = (logits.row(r).transpose().array() - mx).exp();
        y.row(r) = (e / e.sum()).transpose();
    }
    return y;
}

Mat softmax_rows_backward(const Mat& dy, const Mat& y) {
    require_shape(dy.rows() == y.rows() && dy.cols() == y.cols(),
                  "softmax_rows_backward: grad shape " + shape_str(dy) + " vs output " +
                      shape_str(y));
    Mat dx(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
        const double dot = y.row(r).dot(dy.row(r));
        dx.row(r) = y.row(r).array() * (dy.row(r).array() - dot);
    }
    return dx;
}

Vec layer_norm(const Vec& x, const Vec& gamma, const Vec& beta, double eps) {
    if (gamma.size() != x.size() || beta.size() != x.size())
        throw ShapeError("layer_norm: gamma/beta length must match input");
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    return gamma.array() * ((x.array() - mu) * inv) + beta.array();
}

Mat layer_norm_rows(const Mat& x, const Vec& gamma, const Vec& beta, double eps,
                    LayerNormCache* cache) {
    if (gamma.size() != x.cols() || beta.size() != x.cols())
        throw ShapeError("layer_norm_rows: gamma/beta length must match feature axis");
    Mat y(x.rows(), x.cols());
    Mat xhat(x.rows(), x.cols());
    Vec inv_std(x.rows());
    for (Index r = 0; r < x.rows(); ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().mean();
        const double inv = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mu) * inv;
        inv_std(r) = inv;
        y.row(r) = gamma.transpose().array() * xhat.row(r).array() + beta.transpose().array();
    }
    if (cache) {
        cache->xhat = xhat;
        cache->inv_std = inv_std;
    }
    return y;
}

Mat layer_norm_rows_backward(const Mat& dy, const LayerNormCache& cache, const Vec& gamma,
                             Vec& dgamma, Vec& dbeta) {
    const Mat& xhat = cache.xhat;
    require_shape(dy.rows() == xhat.rows() && dy.cols() == xhat.cols(),
                  "layer_norm_rows_backward: grad shape mismatch");
    const Index d = xhat.cols();
    Mat dx(xhat.rows(), d);
    for (Index r = 0; r < xhat.rows(); ++r) {
        Eigen::ArrayXd dxhat = dy.row(r).transpose().array() * gamma.array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xhat.row(r).transpose().array()).mean();
        dx.row(r) =
            (cache.inv_std(r) * (dxhat - m1 - xhat.row(r).transpose().array() * m2)).transpose();
        dgamma.array() += dy.row(r).transpose().array() * xhat.row(r).transpose().array();
        dbeta.array() += dy.row(r).transpose().array();
    }
    return dx;
}

Mat linear(const Mat& x, const Mat& w) {
    require_shape(x.cols() == w.cols(), "linear: input width " + shape_str(x) +
                                            " incompatible with weight " + shape_str(w));
    return x * w.transpose();
}

Mat linear_bias(const Mat& x, const Mat& w, const Mat& b) {
    require_shape(b.rows() == w.rows() && b.cols() == 1,
                  "linear_bias: bias must be [out x 1], got " + shape_str(b));
    Mat y = linear(x, w);
    y.rowwise() += b.col(0).transpose();
    return y;
}

Mat linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat& dw, Mat* db) {
    require_shape(dy.rows() == x.rows() && dy.cols() == w.rows(),
                  "linear_backward: grad shape " + shape_str(dy) + " vs weight " + shape_str(w));
    dw.noalias() += dy.transpose() * x;
    if (db) db->col(0) += dy.colwise().sum().transpose();
    return dy * w;
}

void register_gru(ParamStore& store, const std::string& prefix, GruDims dims, Rng& rng) {
    const double si = 1.0 / std::sqrt(static_cast<double>(dims.in));
    const double sh = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
    for (const char* gate : {"z", "r", "h"}) {
        store.create(prefix + ".w" + gate, gaussian_init(dims.hidden, dims.in, si, rng));
        store.create(prefix + ".u" + gate, gaussian_init(dims.hidden, dims.hidden, sh, rng));
        store.create(prefix + ".b" + gate, dims.hidden, 1);
    }
}

GruDims gru_dims(const ParamStore& store, const std::string& prefix) {
    const Mat& wz = store.value(prefix + ".wz");
    return GruDims{wz.cols(), wz.rows()};
}

Vec gru_cell(const ParamStore& store, const std::string& prefix, const Vec& u, const Vec& s,
             GruCache* cache) {
    const Mat& wz = store.value(prefix + ".wz");
    const Mat& uz = store.value(prefix + ".uz");
    const Mat& bz = store.value(prefix + ".bz");
    const Mat& wr = store.value(prefix + ".wr");
    const Mat& ur = store.value(prefix + ".ur");
    const Mat& br = store.value(prefix + ".br");
    const Mat& wh = store.value(prefix + ".wh");
    const Mat& uh = store.value(prefix + ".uh");
    const Mat& bh = store.value(prefix + ".bh");
    if (u.size() != wz.cols())
        throw ShapeError("gru_cell: input size " + std::to_string(u.size()) +
                         " does not match parameters (" + std::to_string(wz.cols()) + ")");
    if (s.size() != wz.rows())
        throw ShapeError("gru_cell: state size " + std::to_string(s.size()) +
                         " does not match parameters (" + std::to_string(wz.rows()) + ")");

    Vec az = wz * u + uz * s + bz.col(0);
    Vec ar = wr * u + ur * s + br.col(0);
    Vec z = az.unaryExpr([](double v) { return sigmoid(v); });
    Vec r = ar.unaryExpr([](double v) { return sigmoid(v); });
    Vec rs = r.array() * s.array();
    Vec ah = wh * u + uh * rs + bh.col(0);
    Vec h = ah.array().tanh();
    Vec out = (1.0 - z.array()) * s.array() + z.array() * h.array();
    if (cache) {
        cache->u = u;
        cache->s_prev = s;
        cache->z = z;
        cache->r = r;
        cache->hcand = h;
        cache->rs = rs;
    }
    return out;
}

GruGrads gru_cell_backward(ParamStore& store, const std::string& prefix, const Vec& ds_next,
                           const GruCache& c) {
    const Mat& wz = store.value(prefix + ".wz");
    const Mat& uz = store.value(prefix + ".uz");
    const Mat& wr = store.value(prefix + ".wr");
    const Mat& ur = store.value(prefix + ".ur");
    const Mat& wh = store.value(prefix + ".wh");
    const Mat& uh = store.value(prefix + ".uh");

    Vec dz = ds_next.array() * (c.hcand.array() - c.s_prev.array());
    Vec dh = ds_next.array() * c.z.array();
    Vec ds = ds_next.array() * (1.0 - c.z.array());

    Vec dah = dh.array() * (1.0 - c.hcand.array().square());
    store.grad(prefix + ".wh").noalias() += dah * c.u.transpose();
    store.grad(prefix + ".uh").noalias() += dah * c.rs.transpose();
    store.grad(prefix + ".bh").col(0) += dah;
    Vec du = wh.transpose() * dah;
    Vec drs = uh.transpose() * dah;
    Vec dr = drs.array() * c.s_prev.array();
    ds.array() += drs.array() * c.r.array();

    Vec dar = dr.array() * c.r.array() * (1.0 - c.r.array());
    store.grad(prefix + ".wr").noalias() += dar * c.u.transpose();
    store.grad(prefix + ".ur").noalias() += dar * c.s_prev.transpose();
    store.grad(prefix + ".br").col(0) += dar;
    du += wr.transpose() * dar;
    ds += ur.transpose() * dar;

    Vec daz = dz.array() * c.z.array() * (1.0 - c.z.array());
    store.grad(prefix + ".wz").noalias() += daz * c.u.transpose();
    store.grad(prefix + ".uz").noalias() += daz * c.s_prev.transpose();
    store.grad(prefix + ".bz").col(0) += daz;
    du += wz.transpose() * daz;
    ds += uz.transpose() * daz;

    return GruGrads{std::move(du), std::move(ds)};
}

void register_bigru(ParamStore& store, const std::string& prefix, GruDims dims, Rng& rng) {
    register_gru(store, prefix + ".fwd", dims, rng);
    register_gru(store, prefix + ".bwd", dims, rng);
}

Mat bigru_forward(const ParamStore& store, const std::string& prefix, const Mat& x,
                  BiGruCache* cache) {
    const GruDims dims = gru_dims(store, prefix + ".fwd");
    require_shape(x.cols() == dims.in, "bigru_forward: input width " + shape_str(x) +
                                           " does not match parameters");
    const Index L = x.rows();
    Mat hf(L, dims.hidden), hb(L, dims.hidden);
    std::vector<GruCache> cf(cache ? L : 0), cb(cache ? L : 0);

    Vec s = Vec::Zero(dims.hidden);
    for (Index t = 0; t < L; ++t) {
        s = gru_cell(store, prefix + ".fwd", x.row(t).transpose(), s, cache ? &cf[t] : nullptr);
        hf.row(t) = s.transpose();
    }
    s.setZero();
    for (Index t = L - 1; t >= 0; --t) {
        s = gru_cell(store, prefix + ".bwd", x.row(t).transpose(), s, cache ? &cb[t] : nullptr);
        hb.row(t) = s.transpose();
    }
    Mat h(L, 2 * dims.hidden);
    h << hf, hb;
    if (cache) {
        cache->fwd = std::move(cf);
        cache->bwd = std::move(cb);
        cache->hf = std::move(hf);
        cache->hb = std::move(hb);
    }
    return h;
}

Mat bigru_backward(ParamStore& store, const std::string& prefix, const Mat& dh,
                   const BiGruCache& cache) {
    const Index L = dh.rows();
    const Index hidden = cache.hf.cols();
    require_shape(dh.cols() == 2 * hidden, "bigru_backward: grad width mismatch");
    const Index in = cache.fwd.empty() ? 0 : cache.fwd[0].u.size();
    Mat dx = Mat::Zero(L, in);

    Vec carry = Vec::Zero(hidden);
    for (Index t = L - 1; t >= 0; --t) {
        Vec g = dh.row(t).head(hidden).transpose() + carry;
        GruGrads gr = gru_cell_backward(store, prefix + ".fwd", g, cache.fwd[t]);
        dx.row(t) += gr.du.transpose();
        carry = std::move(gr.ds);
    }
    carry.setZero();
    for (Index t = 0; t < L; ++t) {
        Vec g = dh.row(t).tail(hidden).transpose() + carry;
        GruGrads gr = gru_cell_backward(store, prefix + ".bwd", g, cache.bwd[t]);
        dx.row(t) += gr.du.transpose();
        carry = std::move(gr.ds);
    }
    return dx;
}

Mat sdpa(const Mat& q, const Mat& k, const Mat& v, SdpaCache* cache) {
    require_shape(q.cols() == k.cols(), "sdpa: query/key width mismatch");
    require_shape(k.rows() == v.rows(), "sdpa: key/value count mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Mat scores = (q * k.transpose()) * scale;
    Mat w = softmax_rows(scores);
    Mat out = w * v;
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->w = w;
        cache->scale = scale;
    }
    return out;
}

SdpaGrads sdpa_backward(const Mat& dout, const SdpaCache& c) {
    Mat dv = c.w.transpose() * dout;
    Mat dw = dout * c.v.transpose();
    Mat dscores = softmax_rows_backward(dw, c.w);
    SdpaGrads g;
    g.dq = (dscores * c.k) * c.scale;
    g.dk = (dscores.transpose() * c.q) * c.scale;
    g.dv = std::move(dv);
    return g;
}

GradCheckReport grad_check(const std::function<double(ParamStore&)>& loss_fn, ParamStore& store,
                           int sample_count, double tolerance, std::uint64_t seed, double step) {
    GradCheckReport report;
    report.requested = sample_count;

    struct Coord {
        std::string name;
        Index flat;
    };
    std::vector<Coord> all;
    for (const auto& [name, e] : store.entries())
        for (Index i = 0; i < e.value.size(); ++i) all.push_back({name, i});

    std::vector<Coord> picked;
    if (static_cast<int>(all.size()) <= sample_count) {
        picked = all;
    } else {
        Rng rng(seed);
        std::set<std::size_t> seen;
        while (static_cast<int>(picked.size()) < sample_count) {
            std::size_t idx = static_cast<std::size_t>(rng.below(all.size()));
            if (seen.insert(idx).second) picked.push_back(all[idx]);
        }
    }

    store.zero_grads();
    double base = 0.0;
    try {
        base = loss_fn(store);
    } catch (const std::exception& ex) {
        report.aborted = true;
        report.note = std::string("loss evaluation failed: ") + ex.what();
        return report;
    }
    if (!std::isfinite(base)) {
        report.aborted = true;
        report.note = "non-finite loss at base point";
        return report;
    }
    std::map<std::string, Mat> analytic;
    for (const auto& [name, e] : store.entries()) analytic[name] = e.grad;

    for (const Coord& coord : picked) {
        double* cell = store.value(coord.name).data() + coord.flat;
        const double v0 = *cell;
        *cell = v0 + step;
        store.zero_grads();
        double lp = loss_fn(store);
        *cell = v0 - step;
        store.zero_grads();
        double lm = loss_fn(store);
        *cell = v0;
        if (!std::isfinite(lp) || !std::isfinite(lm)) {
            report.aborted = true;
            report.note = "non-finite loss while perturbing " + coord.name;
            return report;
        }
        const double fd = (lp - lm) / (2.0 * step);
        const double an = analytic[coord.name](coord.flat / analytic[coord.name].cols(),
                                               coord.flat % analytic[coord.name].cols());
        const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
        const double rel = std::abs(an - fd) / denom;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_name = coord.name;
            report.worst_index = coord.flat;
        }
        ++report.checked;
    }
    store.zero_grads();
    report.pass = report.checked > 0 && report.max_rel_err < tolerance;
    if (report.checked == 0) {
        report.pass = false;
        report.note = "no coordinates to check";
    }
    return report;
}

}  // namespace dubalign::num
