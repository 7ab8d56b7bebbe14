#pragma once

// Training loops and checkpoint sessions. Reconstruction training runs two
// AdamW optimizers over one backward pass: the logits optimizer owns every
// parameter under "scorer/", the main optimizer owns the rest. All per-step
// randomness (batch picks, Gumbel noise, augmentation) derives from
// (seed, purpose tag, step, slot), so a resumed run continues bitwise.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfms/checkpoint.hpp"
#include "sfms/inpainter.hpp"
#include "sfms/motion_data.hpp"
#include "sfms/predictor.hpp"

namespace sfms::train {

struct TrainConfig {
    long steps = 5000;
    long schedule_steps = 0;  // 0: equal to steps; horizon of lr cosine and tau anneal
    int batch = 4;
    int samples_per_seq = 4;
    double lr_main = 1e-3;
    double lr_logits = -1;  // < 0: lr_main / 10; 0 freezes the scorer
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double weight_decay = 0;
    double alpha = 0.1;       // mask-loss weight in the recon objective
    double nll_weight = 1.0;  // best-placement likelihood weight for the scorer
    double tau_start = 5.0;
    double tau_end = 0.5;
    AnnealShape tau_shape = AnnealShape::kExponential;
    std::uint64_t seed = 1;
    long checkpoint_every = 0;  // 0: final checkpoint only
    std::string checkpoint_out;
    std::string log_csv;

    long horizon() const { return schedule_steps > 0 ? schedule_steps : steps; }
    double logits_lr() const { return lr_logits >= 0 ? lr_logits : lr_main / 10.0; }
    AnnealSchedule tau_schedule() const { return {tau_start, tau_end, horizon(), tau_shape}; }
    void validate() const;
};

struct SparsityAblationConfig {
    bool enabled = false;
    int K_target = 7;
    double weight = 1.0;
};

// |sum(probs) - K|; probabilities must already live in [0, 1].
double sparsity_loss(const std::vector<double>& frame_probs, int K_target);

// Assemble the loss ledger from its raw ingredients. The motion term is the
// mean squared error over all T x d entries.
pipeline::ReconLossReport recon_loss(const Mat<real>& seq, const Mat<real>& recon,
                                     std::pair<double, double> vq_terms, double mask_term,
                                     double alpha);

// --- differentiable loss pieces shared by training and tests -----------------

// sum_c |p_c - p_max| over softmax(logits); logits_row is 1xT.
template <class R>
ad::V<R> mask_loss_node(ad::V<R> logits_row) {
    ad::V<R> p = ad::softmax_rows(logits_row);
    ad::V<R> p_max = ad::max_all(p);
    ad::V<R> tiled = ad::mul_scalarvar(
        ad::constant(*logits_row.g, Mat<R>::full(1, logits_row.cols(), R(1))), p_max);
    return ad::sum_all(ad::abs_(ad::sub(p, tiled)));
}

// |sum(sigmoid(logits)) - K|: the sparsity ablation reads the per-frame
// scores as independent keep-probabilities.
template <class R>
ad::V<R> sparsity_loss_node(ad::V<R> logits_row, int K_target) {
    ad::V<R> s = ad::sum_all(ad::sigmoid(logits_row));
    return ad::abs_(ad::add_scalar(s, static_cast<R>(-K_target)));
}

// Negative log-likelihood of drawing `chosen` under sequential softmax
// sampling without replacement, in the canonical descending-logit order.
template <class R>
ad::V<R> placement_nll(ad::V<R> logits_row, const std::vector<int>& chosen) {
    if (logits_row.rows() != 1) throw DimensionError("placement_nll: logits must be 1xT");
    int T = logits_row.cols();
    const Mat<R>& lv = logits_row.val();
    std::vector<int> order = chosen;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return lv(0, a) > lv(0, b) || (lv(0, a) == lv(0, b) && a < b); });
    ad::V<R> lt = ad::transpose(logits_row);  // T x 1
    std::vector<int> remaining(T);
    for (int i = 0; i < T; ++i) remaining[i] = i;
    ad::V<R> nll;
    for (std::size_t k = 0; k < order.size(); ++k) {
        ad::V<R> lse = ad::logsumexp_all(ad::gather_rows(lt, remaining));
        ad::V<R> term = ad::sub(lse, ad::pick(lt, order[k], 0));
        nll = (k == 0) ? term : ad::add(nll, term);
        remaining.erase(std::find(remaining.begin(), remaining.end(), order[k]));
    }
    return nll;
}

// --- sessions ----------------------------------------------------------------

struct ReconSession {
    pipeline::PipelineConfig pcfg;
    TrainConfig tcfg;
    SparsityAblationConfig ablation;
    ParamStore<real> ps;
    AdamW<real> opt_main;
    AdamW<real> opt_logits;
    long step = 0;  // completed steps
};

ReconSession make_recon_session(const pipeline::PipelineConfig& pcfg, const TrainConfig& tcfg,
                                const SparsityAblationConfig& ablation = {});
void save_recon_checkpoint(const ReconSession& s, const std::string& path);
// Restores parameters, both optimizers, the step counter, and the pipeline
// shape from checkpoint metadata; the train config is taken from `tcfg`.
ReconSession load_recon_session(const std::string& path, const TrainConfig& tcfg,
                                const SparsityAblationConfig& ablation = {});
// Inference-side loader: parameters + pipeline shape + stored alpha.
struct ReconModel {
    pipeline::PipelineConfig pcfg;
    ParamStore<real> ps;
    double alpha = 0;
};
ReconModel load_recon_model(const std::string& path);

struct TrainResult {
    long steps_run = 0;
    pipeline::ReconLossReport first;
    pipeline::ReconLossReport last;
};

TrainResult train_recon(ReconSession& s, const std::vector<MotionSequence>& data);

// --- predictor training --------------------------------------------------------

struct PredTrainConfig {
    long steps = 2000;
    long schedule_steps = 0;
    int batch = 8;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double weight_decay = 0;
    std::uint64_t seed = 1;
    long checkpoint_every = 0;
    std::string checkpoint_out;
    std::string log_csv;

    long horizon() const { return schedule_steps > 0 ? schedule_steps : steps; }
    void validate() const;
};

struct PredictorSession {
    pred::PredictorConfig pcfg;
    PredTrainConfig tcfg;
    int d_speaker = 0;
    int recon_K = 7;  // keyframe budget of the tokenizer; sets default weights
    ParamStore<real> ps;
    AdamW<real> opt;
    long step = 0;
};

PredictorSession make_predictor_session(const pred::PredictorConfig& pcfg,
                                        const PredTrainConfig& tcfg, int d_speaker, int recon_K);
void save_predictor_checkpoint(const PredictorSession& s, const std::string& path);
PredictorSession load_predictor_session(const std::string& path, const PredTrainConfig& tcfg);

// A dyad with its listener track swapped for frozen-tokenizer classes.
struct TokenizedDyad {
    MotionSequence speaker;
    AudioFeatures audio;
    std::vector<int> listener_classes;
};

std::vector<TokenizedDyad> tokenize_dyads(const std::vector<DyadContext>& dyads,
                                          ParamStore<real>& recon_ps,
                                          const pipeline::PipelineConfig& rcfg);

struct PredTrainResult {
    long steps_run = 0;
    double first_loss = 0;
    double last_loss = 0;
};

PredTrainResult train_predictor(PredictorSession& s, const std::vector<TokenizedDyad>& data);

struct PredEval {
    double accuracy = 0;
    double keyframe_recall = 0;
    long slots = 0;
    long keyframe_slots = 0;
};

// Teacher-forced evaluation over every window at the given stride.
PredEval eval_predictor(PredictorSession& s, const std::vector<TokenizedDyad>& data, int stride);

// --- small CSV support used by logs and their consumers ------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv(const std::string& path);

}  // namespace sfms::train
