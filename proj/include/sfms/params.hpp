#pragma once

// Named parameter storage shared by all models. Parameters live in insertion
// order (deterministic iteration for optimizers and checkpoints) and are
// addressed by slash-separated path strings, e.g. "scorer/enc/l0/attn/wq".
// Initialization is a pure function of (root seed, parameter name) so two
// runs with the same seed build bitwise-identical models.

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sfms/autodiff.hpp"
#include "sfms/common.hpp"
#include "sfms/mat.hpp"

namespace sfms {

enum class Init { kZeros, kOnes, kXavier, kNormal02, kUniformSym };

template <class R>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Mat<R> value;
    };

    int add(const std::string& name, int rows, int cols, Init init, std::uint64_t root_seed,
            R uniform_half_range = R(0)) {
        Mat<R> m(rows, cols);
        rng::Rng r(rng::derive(root_seed, name.c_str()));
        switch (init) {
            case Init::kZeros:
                break;
            case Init::kOnes:
                for (R& v : m.a) v = R(1);
                break;
            case Init::kXavier: {
                double lim = std::sqrt(6.0 / (rows + cols));
                for (R& v : m.a) v = static_cast<R>(r.uniform(-lim, lim));
                break;
            }
            case Init::kNormal02:
                for (R& v : m.a) v = static_cast<R>(r.normal() * 0.02);
                break;
            case Init::kUniformSym:
                for (R& v : m.a)
                    v = static_cast<R>(r.uniform(-static_cast<double>(uniform_half_range),
                                                 static_cast<double>(uniform_half_range)));
                break;
        }
        return add_raw(name, std::move(m));
    }

    int add_raw(const std::string& name, Mat<R> value) {
        if (index_.count(name)) throw ValidationError("duplicate parameter: " + name);
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back({name, std::move(value)});
        return static_cast<int>(entries_.size()) - 1;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
        return it->second;
    }

    Mat<R>& at(const std::string& name) { return entries_[index_of(name)].value; }
    const Mat<R>& at(const std::string& name) const { return entries_[index_of(name)].value; }
    Mat<R>& at(int idx) { return entries_[idx].value; }
    const std::string& name_of(int idx) const { return entries_[idx].name; }
    int count() const { return static_cast<int>(entries_.size()); }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Per-forward-pass binding of parameters into a graph. Binding the same name
// twice returns the same leaf node, so gradient accumulation is automatic.
template <class R>
class Binder {
  public:
    Binder(ad::Graph<R>& g, ParamStore<R>& ps, bool train) : g_(&g), ps_(&ps), train_(train) {}

    ad::V<R> operator()(const std::string& name) {
        int idx = ps_->index_of(name);
        auto it = node_of_.find(idx);
        if (it != node_of_.end()) return {g_, it->second};
        ad::V<R> v = ad::leaf(*g_, ps_->at(idx), train_);
        node_of_[idx] = v.id;
        return v;
    }

    // Visit (param index, grad matrix) for every bound parameter, in store
    // order. Unreached parameters contribute a zero gradient.
    template <class F>
    void for_each_grad(F&& f) {
        std::vector<std::pair<int, int>> items(node_of_.begin(), node_of_.end());
        std::sort(items.begin(), items.end());
        for (auto [idx, node] : items) f(idx, g_->grad(node));
    }

    bool bound(const std::string& name) const {
        auto it = ps_->has(name) ? node_of_.find(ps_->index_of(name)) : node_of_.end();
        return it != node_of_.end();
    }

  private:
    ad::Graph<R>* g_;
    ParamStore<R>* ps_;
    bool train_;
    std::unordered_map<int, int> node_of_;
};

// Decoupled-weight-decay Adam. Moments are stored per parameter index and
// belong to the checkpoint, so resumed runs continue bitwise.
template <class R>
class AdamW {
  public:
    AdamW() = default;
    AdamW(R beta1, R beta2, R eps, R weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void ensure_size(const ParamStore<R>& ps) {
        while (static_cast<int>(m_.size()) < ps.count()) {
            int i = static_cast<int>(m_.size());
            const Mat<R>& v = ps.entries()[i].value;
            m_.push_back(Mat<R>::zeros(v.rows, v.cols));
            v_.push_back(Mat<R>::zeros(v.rows, v.cols));
        }
    }

    // t is the 1-based global step (shared by both optimizers).
    void apply(ParamStore<R>& ps, int idx, const Mat<R>& grad, R lr, long t) {
        Mat<R>& m = m_[idx];
        Mat<R>& v = v_[idx];
        Mat<R>& w = ps.at(idx);
        R b1 = beta1_, b2 = beta2_;
        R c1 = R(1) - static_cast<R>(std::pow(static_cast<double>(b1), static_cast<double>(t)));
        R c2 = R(1) - static_cast<R>(std::pow(static_cast<double>(b2), static_cast<double>(t)));
        for (std::size_t i = 0; i < w.size(); ++i) {
            R gi = grad.a[i];
            m.a[i] = b1 * m.a[i] + (R(1) - b1) * gi;
            v.a[i] = b2 * v.a[i] + (R(1) - b2) * gi * gi;
            R mhat = m.a[i] / c1;
            R vhat = v.a[i] / c2;
            w.a[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w.a[i]);
        }
    }

    Mat<R>& moment1(int idx) { return m_[idx]; }
    Mat<R>& moment2(int idx) { return v_[idx]; }
    R beta1() const { return beta1_; }
    R beta2() const { return beta2_; }
    R eps() const { return eps_; }
    R weight_decay() const { return wd_; }

  private:
    R beta1_ = R(0.9), beta2_ = R(0.98), eps_ = R(1e-8), wd_ = R(0);
    std::vector<Mat<R>> m_, v_;
};

// Cosine-annealed learning rate over a fixed horizon; step in [0, horizon).
inline double cosine_lr(double base, long step, long horizon) {
    if (horizon <= 1) return base;
    double frac = static_cast<double>(step) / static_cast<double>(horizon - 1);
    if (frac > 1.0) frac = 1.0;
    return 0.5 * base * (1.0 + std::cos(3.14159265358979323846 * frac));
}

enum class AnnealShape { kLinear, kExponential, kCosine };

struct AnnealSchedule {
    double tau_start = 5.0;
    double tau_end = 0.5;
    long steps = 1;
    AnnealShape shape = AnnealShape::kExponential;

    // Non-increasing; tau(steps - 1) == tau_end exactly.
    double tau(long step) const {
        if (tau_end > tau_start) throw ValidationError("anneal: tau_end must be <= tau_start");
        if (steps <= 1 || step >= steps - 1) return tau_end;
        if (step <= 0) return tau_start;
        double frac = static_cast<double>(step) / static_cast<double>(steps - 1);
        switch (shape) {
            case AnnealShape::kLinear:
                return tau_start + (tau_end - tau_start) * frac;
            case AnnealShape::kExponential:
                return tau_start * std::pow(tau_end / tau_start, frac);
            case AnnealShape::kCosine:
                return tau_end + 0.5 * (tau_start - tau_end) *
                                     (1.0 + std::cos(3.14159265358979323846 * frac));
        }
        return tau_end;
    }
};

}  // namespace sfms
