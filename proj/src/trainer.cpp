#include "sfms/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "sfms/sampler.hpp"

namespace sfms::train {

void TrainConfig::validate() const {
    if (steps < 0) throw ValidationError("train config: steps must be >= 0");
    if (batch < 1) throw ValidationError("train config: batch must be >= 1");
    if (samples_per_seq < 1) throw ValidationError("train config: samples_per_seq must be >= 1");
    if (!(lr_main >= 0)) throw ValidationError("train config: lr_main must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        throw ValidationError("train config: betas must lie in [0, 1)");
    if (!(tau_start > 0) || !(tau_end > 0) || tau_end > tau_start)
        throw ValidationError("train config: need tau_start >= tau_end > 0");
    if (alpha < 0) throw ValidationError("train config: alpha must be >= 0");
    if (schedule_steps < 0) throw ValidationError("train config: schedule_steps must be >= 0");
}

void PredTrainConfig::validate() const {
    if (steps < 0) throw ValidationError("pred train config: steps must be >= 0");
    if (batch < 1) throw ValidationError("pred train config: batch must be >= 1");
    if (!(lr >= 0)) throw ValidationError("pred train config: lr must be >= 0");
    if (schedule_steps < 0) throw ValidationError("pred train config: schedule_steps must be >= 0");
}

double sparsity_loss(const std::vector<double>& frame_probs, int K_target) {
    if (frame_probs.empty()) throw ValidationError("sparsity_loss: empty probability vector");
    double s = 0;
    for (double p : frame_probs) {
        if (!(p >= 0.0 && p <= 1.0))
            throw ValidationError("sparsity_loss: probabilities must lie in [0, 1]");
        s += p;
    }
    return std::abs(s - static_cast<double>(K_target));
}

pipeline::ReconLossReport recon_loss(const Mat<real>& seq, const Mat<real>& recon,
                                     std::pair<double, double> vq_terms, double mask_term,
                                     double alpha) {
    if (!seq.same_shape(recon)) throw DimensionError("recon_loss: shape mismatch");
    double se = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        double d = static_cast<double>(seq.a[i]) - static_cast<double>(recon.a[i]);
        se += d * d;
    }
    double motion = se / static_cast<double>(seq.size());
    return pipeline::ReconLossReport::make(motion, vq_terms.first, vq_terms.second, mask_term,
                                           alpha);
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

namespace {

Mat<float> scalar_mat(double v) {
    Mat<float> m(1, 1);
    m(0, 0) = static_cast<float>(v);
    return m;
}

class EntryMap {
  public:
    explicit EntryMap(std::vector<CheckpointEntry> entries) : entries_(std::move(entries)) {
        for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].name] = i;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Mat<float>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw ParseError("checkpoint is missing entry '" + name + "'", 0);
        return entries_[it->second].value;
    }

    double get_scalar(const std::string& name) const {
        const Mat<float>& m = get(name);
        if (m.rows != 1 || m.cols != 1)
            throw ParseError("checkpoint entry '" + name + "' is not scalar", 0);
        return static_cast<double>(m(0, 0));
    }

  private:
    std::vector<CheckpointEntry> entries_;
    std::map<std::string, std::size_t> index_;
};

bool is_scorer_param(const std::string& name) { return name.rfind("scorer/", 0) == 0; }

void append_params_and_opt(std::vector<CheckpointEntry>& out, const ParamStore<real>& ps,
                           const AdamW<real>& opt_for, AdamW<real>& opt_main,
                           AdamW<real>& opt_logits, bool dual, long step) {
    (void)opt_for;
    for (const auto& e : ps.entries()) out.push_back({e.name, e.value});
    for (int i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.name_of(i);
        AdamW<real>& owner = dual && is_scorer_param(name) ? opt_logits : opt_main;
        out.push_back({"opt/m/" + name, owner.moment1(i)});
        out.push_back({"opt/v/" + name, owner.moment2(i)});
    }
    out.push_back({"opt/step", scalar_mat(static_cast<double>(step))});
}

void restore_params_and_opt(const EntryMap& map, ParamStore<real>& ps, AdamW<real>& opt_main,
                            AdamW<real>& opt_logits, bool dual, long& step) {
    opt_main.ensure_size(ps);
    opt_logits.ensure_size(ps);
    for (int i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.name_of(i);
        const Mat<float>& v = map.get(name);
        if (!v.same_shape(ps.at(i)))
            throw ParseError("checkpoint entry '" + name + "' has the wrong shape", 0);
        ps.at(i) = v;
        AdamW<real>& owner = dual && is_scorer_param(name) ? opt_logits : opt_main;
        owner.moment1(i) = map.get("opt/m/" + name);
        owner.moment2(i) = map.get("opt/v/" + name);
        if (!owner.moment1(i).same_shape(ps.at(i)) || !owner.moment2(i).same_shape(ps.at(i)))
            throw ParseError("optimizer moments for '" + name + "' have the wrong shape", 0);
    }
    step = static_cast<long>(map.get_scalar("opt/step"));
}

void append_recon_meta(std::vector<CheckpointEntry>& out, const pipeline::PipelineConfig& pcfg,
                       double alpha) {
    out.push_back({"meta/kind", scalar_mat(0)});
    out.push_back({"meta/d", scalar_mat(pcfg.d)});
    out.push_back({"meta/K", scalar_mat(pcfg.K)});
    out.push_back({"meta/window", scalar_mat(pcfg.window)});
    out.push_back({"meta/model_dim", scalar_mat(pcfg.stack.model_dim)});
    out.push_back({"meta/heads", scalar_mat(pcfg.stack.heads)});
    out.push_back({"meta/layers", scalar_mat(pcfg.stack.layers)});
    out.push_back({"meta/ffn", scalar_mat(pcfg.stack.ffn)});
    out.push_back({"meta/conv_kernel", scalar_mat(pcfg.conv_kernel)});
    out.push_back({"meta/conv_out", scalar_mat(pcfg.conv_out)});
    out.push_back({"meta/mode", scalar_mat(static_cast<int>(pcfg.mode))});
    out.push_back({"meta/quant_kind", scalar_mat(pcfg.quant.kind == quant::Kind::kVq ? 0 : 1)});
    out.push_back({"meta/vq_size", scalar_mat(pcfg.quant.vq_size)});
    if (!pcfg.quant.fsq_levels.empty()) {
        Mat<float> levels(1, static_cast<int>(pcfg.quant.fsq_levels.size()));
        for (std::size_t i = 0; i < pcfg.quant.fsq_levels.size(); ++i)
            levels(0, static_cast<int>(i)) = static_cast<float>(pcfg.quant.fsq_levels[i]);
        out.push_back({"meta/fsq_levels", std::move(levels)});
    }
    out.push_back({"meta/alpha", scalar_mat(alpha)});
}

pipeline::PipelineConfig recon_meta_config(const EntryMap& map) {
    if (static_cast<int>(map.get_scalar("meta/kind")) != 0)
        throw ParseError("checkpoint is not a reconstruction checkpoint", 0);
    pipeline::PipelineConfig pcfg;
    pcfg.d = static_cast<int>(map.get_scalar("meta/d"));
    pcfg.K = static_cast<int>(map.get_scalar("meta/K"));
    pcfg.window = static_cast<int>(map.get_scalar("meta/window"));
    pcfg.stack.model_dim = static_cast<int>(map.get_scalar("meta/model_dim"));
    pcfg.stack.heads = static_cast<int>(map.get_scalar("meta/heads"));
    pcfg.stack.layers = static_cast<int>(map.get_scalar("meta/layers"));
    pcfg.stack.ffn = static_cast<int>(map.get_scalar("meta/ffn"));
    pcfg.conv_kernel = static_cast<int>(map.get_scalar("meta/conv_kernel"));
    pcfg.conv_out = static_cast<int>(map.get_scalar("meta/conv_out"));
    pcfg.mode = static_cast<pipeline::Mode>(static_cast<int>(map.get_scalar("meta/mode")));
    pcfg.quant.kind =
        static_cast<int>(map.get_scalar("meta/quant_kind")) == 0 ? quant::Kind::kVq
                                                                 : quant::Kind::kFsq;
    pcfg.quant.vq_size = static_cast<int>(map.get_scalar("meta/vq_size"));
    pcfg.quant.fsq_levels.clear();
    if (map.has("meta/fsq_levels")) {
        const Mat<float>& levels = map.get("meta/fsq_levels");
        for (int c = 0; c < levels.cols; ++c)
            pcfg.quant.fsq_levels.push_back(static_cast<int>(levels(0, c)));
    }
    return pcfg;
}

// CSV helpers. Doubles print with %.17g so a parsed value is the original bit
// pattern.
std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class CsvLog {
  public:
    CsvLog(const std::string& path, bool fresh, const std::string& header) : path_(path) {
        if (path_.empty()) return;
        out_.open(path_, fresh ? std::ios::trunc : std::ios::app);
        if (!out_) throw IoError("cannot open log file: " + path_);
        if (fresh) out_ << header << "\n";
    }

    void row(const std::string& line) {
        if (path_.empty()) return;
        out_ << line << "\n";
        out_.flush();
        if (!out_) throw IoError("cannot write log file: " + path_);
    }

  private:
    std::string path_;
    std::ofstream out_;
};

[[noreturn]] void abort_nonfinite(const std::string& log_csv, long step,
                                  const std::vector<int>& batch_ids,
                                  const std::vector<std::string>& detail) {
    std::string path = (log_csv.empty() ? std::string("train") : log_csv) + ".nan-dump.txt";
    std::ofstream dump(path, std::ios::trunc);
    dump << "non-finite loss at step " << step << "\n";
    dump << "batch sequence indices:";
    for (int i : batch_ids) dump << " " << i;
    dump << "\n";
    for (const std::string& d : detail) dump << d << "\n";
    dump.close();
    throw NumericalError("non-finite loss at step " + std::to_string(step) +
                         "; diagnostics written to " + path);
}

}  // namespace

// ---------------------------------------------------------------------------
// Reconstruction training
// ---------------------------------------------------------------------------

ReconSession make_recon_session(const pipeline::PipelineConfig& pcfg, const TrainConfig& tcfg,
                                const SparsityAblationConfig& ablation) {
    tcfg.validate();
    ReconSession s;
    s.pcfg = pcfg;
    s.tcfg = tcfg;
    s.ablation = ablation;
    pipeline::register_recon_models(s.ps, pcfg, tcfg.seed);
    s.opt_main = AdamW<real>(static_cast<real>(tcfg.beta1), static_cast<real>(tcfg.beta2),
                             static_cast<real>(tcfg.adam_eps),
                             static_cast<real>(tcfg.weight_decay));
    s.opt_logits = s.opt_main;
    s.opt_main.ensure_size(s.ps);
    s.opt_logits.ensure_size(s.ps);
    return s;
}

void save_recon_checkpoint(const ReconSession& s, const std::string& path) {
    std::vector<CheckpointEntry> entries;
    append_recon_meta(entries, s.pcfg, s.tcfg.alpha);
    ReconSession& ms = const_cast<ReconSession&>(s);  // moment getters are non-const
    append_params_and_opt(entries, s.ps, ms.opt_main, ms.opt_main, ms.opt_logits, true, s.step);
    write_checkpoint(path, entries);
}

ReconSession load_recon_session(const std::string& path, const TrainConfig& tcfg,
                                const SparsityAblationConfig& ablation) {
    EntryMap map(read_checkpoint(path));
    ReconSession s = make_recon_session(recon_meta_config(map), tcfg, ablation);
    restore_params_and_opt(map, s.ps, s.opt_main, s.opt_logits, true, s.step);
    return s;
}

ReconModel load_recon_model(const std::string& path) {
    EntryMap map(read_checkpoint(path));
    ReconModel m;
    m.pcfg = recon_meta_config(map);
    m.alpha = map.get_scalar("meta/alpha");
    pipeline::register_recon_models(m.ps, m.pcfg, 0);
    AdamW<real> dummy_main, dummy_logits;
    long step = 0;
    restore_params_and_opt(map, m.ps, dummy_main, dummy_logits, true, step);
    return m;
}

namespace {

struct Cand {
    std::vector<int> indices;
    int slot = 0;
};

}  // namespace

TrainResult train_recon(ReconSession& s, const std::vector<MotionSequence>& data) {
    s.tcfg.validate();
    if (data.empty()) throw ValidationError("train_recon: empty dataset");
    for (const MotionSequence& seq : data) {
        seq.validate();
        if (seq.frames.rows != s.pcfg.window)
            throw ValidationError("train_recon: sequences must be exactly one window (" +
                                  std::to_string(s.pcfg.window) + " frames) long");
        if (seq.frames.cols != s.pcfg.d)
            throw DimensionError("train_recon: channel count mismatch with pipeline");
    }

    const TrainConfig& cfg = s.tcfg;
    AnnealSchedule tau_sched = cfg.tau_schedule();
    const bool dynamic = s.pcfg.mode == pipeline::Mode::kDynamic;
    const bool vq = s.pcfg.quant.kind == quant::Kind::kVq;
    const int T = s.pcfg.window;

    CsvLog log(cfg.log_csv, s.step == 0,
               "step,motion_l2,quant_codebook,quant_commit,mask_loss,alpha,total,sparsity,"
               "objective,tau,lr_main,lr_logits");

    SFMS_INFO("recon training: steps %ld..%ld over %zu window(s), mode %s", s.step, cfg.steps,
              data.size(), pipeline::mode_name(s.pcfg.mode));
    TrainResult result;
    for (long step = s.step; step < cfg.steps; ++step) {
        double tau = tau_sched.tau(step);
        double lr_m = cosine_lr(cfg.lr_main, step, cfg.horizon());
        double lr_l = cosine_lr(cfg.logits_lr(), step, cfg.horizon());

        ad::Graph<real> g;
        Binder<real> B(g, s.ps, true);

        double motion_c = 0, qcb_c = 0, qcm_c = 0, mask_c = 0, sparse_c = 0, nll_c = 0;
        std::vector<int> batch_ids;
        std::vector<std::string> detail;
        ad::V<real> loss_sum;

        for (int b = 0; b < cfg.batch; ++b) {
            int idx = static_cast<int>(rng::derive(cfg.seed, "batch", step, b) % data.size());
            batch_ids.push_back(idx);
            ad::V<real> frames = ad::constant(g, data[idx].frames);

            pipeline::SparseForward<real> fwd;
            ad::V<real> seq_loss;
            if (dynamic) {
                ad::V<real> logits =
                    sampler::score_logits(B, "scorer", frames, s.pcfg.scorer_dims());
                std::vector<pipeline::SparseForward<real>> fwds;
                std::vector<std::pair<Cand, double>> cands;
                for (int j = 0; j < cfg.samples_per_seq; ++j) {
                    std::vector<real> noise = sampler::gumbel_noise<real>(
                        T, rng::derive(cfg.seed, "noise", step,
                                       static_cast<std::uint64_t>(b) * cfg.samples_per_seq + j));
                    sampler::SoftTopkGraph<real> stg = sampler::soft_topk_mask_graph(
                        logits, s.pcfg.K, static_cast<real>(tau), noise);
                    pipeline::SparseForward<real> f = pipeline::sparse_forward(
                        B, s.pcfg, frames, stg.indices, stg.straight_through);
                    double err = static_cast<double>(f.motion_mse.val()(0, 0));
                    cands.push_back({{stg.indices, j}, err});
                    fwds.push_back(std::move(f));
                }
                const Cand& best = sampler::select_best_placement(cands);
                fwd = fwds[best.slot];

                ad::V<real> mask = mask_loss_node(logits);
                ad::V<real> nll = placement_nll(logits, best.indices);
                seq_loss = fwd.motion_mse;
                if (vq)
                    seq_loss = ad::add(seq_loss, ad::add(fwd.codebook_loss, fwd.commitment_loss));
                seq_loss = ad::add(seq_loss, ad::scale(mask, static_cast<real>(cfg.alpha)));
                seq_loss = ad::add(seq_loss, ad::scale(nll, static_cast<real>(cfg.nll_weight)));
                if (s.ablation.enabled) {
                    ad::V<real> sp = sparsity_loss_node(logits, s.ablation.K_target);
                    seq_loss = ad::add(seq_loss, ad::scale(sp, static_cast<real>(s.ablation.weight)));
                    sparse_c += static_cast<double>(sp.val()(0, 0));
                }
                mask_c += static_cast<double>(mask.val()(0, 0));
                nll_c += static_cast<double>(nll.val()(0, 0));
            } else if (s.pcfg.mode == pipeline::Mode::kStatic) {
                fwd = pipeline::sparse_forward(B, s.pcfg, frames,
                                               pipeline::static_indices(T, s.pcfg.K));
                seq_loss = fwd.motion_mse;
                if (vq)
                    seq_loss = ad::add(seq_loss, ad::add(fwd.codebook_loss, fwd.commitment_loss));
            } else {
                fwd = pipeline::dense_forward(B, s.pcfg, frames);
                seq_loss = fwd.motion_mse;
                if (vq)
                    seq_loss = ad::add(seq_loss, ad::add(fwd.codebook_loss, fwd.commitment_loss));
            }

            double m = static_cast<double>(fwd.motion_mse.val()(0, 0));
            motion_c += m;
            if (vq) {
                qcb_c += static_cast<double>(fwd.codebook_loss.val()(0, 0));
                qcm_c += static_cast<double>(fwd.commitment_loss.val()(0, 0));
            }
            detail.push_back("seq " + std::to_string(idx) + ": motion=" + fmt_double(m));
            loss_sum = (b == 0) ? seq_loss : ad::add(loss_sum, seq_loss);
        }

        ad::V<real> loss = ad::scale(loss_sum, static_cast<real>(1.0 / cfg.batch));
        double objective = static_cast<double>(loss.val()(0, 0));
        int B_ = cfg.batch;
        pipeline::ReconLossReport report = pipeline::ReconLossReport::make(
            motion_c / B_, qcb_c / B_, qcm_c / B_, mask_c / B_, cfg.alpha);
        double sparse_mean = sparse_c / B_;
        (void)nll_c;
        if (!std::isfinite(objective) || !std::isfinite(report.total))
            abort_nonfinite(cfg.log_csv, step, batch_ids, detail);

        g.backward(loss.id);

        B.for_each_grad([&](int idx, const Mat<real>& grad) {
            bool scorer = is_scorer_param(s.ps.name_of(idx));
            if (scorer)
                s.opt_logits.apply(s.ps, idx, grad, static_cast<real>(lr_l), step + 1);
            else
                s.opt_main.apply(s.ps, idx, grad, static_cast<real>(lr_m), step + 1);
        });
        s.step = step + 1;

        log.row(std::to_string(step) + "," + fmt_double(report.motion_l2) + "," +
                fmt_double(report.quant_codebook) + "," + fmt_double(report.quant_commit) + "," +
                fmt_double(report.mask_loss) + "," + fmt_double(report.alpha) + "," +
                fmt_double(report.total) + "," + fmt_double(sparse_mean) + "," +
                fmt_double(objective) + "," + fmt_double(tau) + "," + fmt_double(lr_m) + "," +
                fmt_double(lr_l));
        SFMS_DEBUG("step %ld objective=%.6g tau=%.3g", step, objective, tau);

        if (result.steps_run == 0) result.first = report;
        result.last = report;
        ++result.steps_run;

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_out.empty() &&
            s.step % cfg.checkpoint_every == 0)
            save_recon_checkpoint(s, cfg.checkpoint_out);
    }

    if (!cfg.checkpoint_out.empty()) save_recon_checkpoint(s, cfg.checkpoint_out);
    return result;
}

// ---------------------------------------------------------------------------
// Predictor training
// ---------------------------------------------------------------------------

namespace {

void append_pred_meta(std::vector<CheckpointEntry>& out, const pred::PredictorConfig& cfg,
                      int d_speaker, int recon_K) {
    out.push_back({"meta/kind", scalar_mat(1)});
    out.push_back({"meta/past", scalar_mat(cfg.past)});
    out.push_back({"meta/future", scalar_mat(cfg.future)});
    out.push_back({"meta/num_classes", scalar_mat(cfg.num_classes)});
    out.push_back({"meta/model_dim", scalar_mat(cfg.stack.model_dim)});
    out.push_back({"meta/heads", scalar_mat(cfg.stack.heads)});
    out.push_back({"meta/layers", scalar_mat(cfg.stack.layers)});
    out.push_back({"meta/ffn", scalar_mat(cfg.stack.ffn)});
    out.push_back({"meta/audio_kernel", scalar_mat(cfg.audio_kernel)});
    out.push_back({"meta/audio_vocab", scalar_mat(cfg.audio_vocab)});
    out.push_back({"meta/use_audio", scalar_mat(cfg.use_audio ? 1 : 0)});
    out.push_back({"meta/w0", scalar_mat(cfg.w0)});
    out.push_back({"meta/w_key", scalar_mat(cfg.w_key)});
    out.push_back({"meta/dtw_weight", scalar_mat(cfg.dtw_weight)});
    out.push_back({"meta/dtw_gamma", scalar_mat(cfg.dtw_gamma)});
    out.push_back({"meta/neutral_prob", scalar_mat(cfg.neutral_prob)});
    out.push_back({"meta/neutral_min", scalar_mat(cfg.neutral_min)});
    out.push_back({"meta/neutral_max", scalar_mat(cfg.neutral_max)});
    out.push_back({"meta/d_speaker", scalar_mat(d_speaker)});
    out.push_back({"meta/recon_K", scalar_mat(recon_K)});
}

pred::PredictorConfig pred_meta_config(const EntryMap& map, int& d_speaker, int& recon_K) {
    if (static_cast<int>(map.get_scalar("meta/kind")) != 1)
        throw ParseError("checkpoint is not a predictor checkpoint", 0);
    pred::PredictorConfig cfg;
    cfg.past = static_cast<int>(map.get_scalar("meta/past"));
    cfg.future = static_cast<int>(map.get_scalar("meta/future"));
    cfg.num_classes = static_cast<int>(map.get_scalar("meta/num_classes"));
    cfg.stack.model_dim = static_cast<int>(map.get_scalar("meta/model_dim"));
    cfg.stack.heads = static_cast<int>(map.get_scalar("meta/heads"));
    cfg.stack.layers = static_cast<int>(map.get_scalar("meta/layers"));
    cfg.stack.ffn = static_cast<int>(map.get_scalar("meta/ffn"));
    cfg.audio_kernel = static_cast<int>(map.get_scalar("meta/audio_kernel"));
    cfg.audio_vocab = static_cast<int>(map.get_scalar("meta/audio_vocab"));
    cfg.use_audio = static_cast<int>(map.get_scalar("meta/use_audio")) != 0;
    cfg.w0 = map.get_scalar("meta/w0");
    cfg.w_key = map.get_scalar("meta/w_key");
    cfg.dtw_weight = map.get_scalar("meta/dtw_weight");
    cfg.dtw_gamma = map.get_scalar("meta/dtw_gamma");
    cfg.neutral_prob = map.get_scalar("meta/neutral_prob");
    cfg.neutral_min = static_cast<int>(map.get_scalar("meta/neutral_min"));
    cfg.neutral_max = static_cast<int>(map.get_scalar("meta/neutral_max"));
    d_speaker = static_cast<int>(map.get_scalar("meta/d_speaker"));
    recon_K = static_cast<int>(map.get_scalar("meta/recon_K"));
    return cfg;
}

}  // namespace

PredictorSession make_predictor_session(const pred::PredictorConfig& pcfg,
                                        const PredTrainConfig& tcfg, int d_speaker, int recon_K) {
    tcfg.validate();
    if (pcfg.num_classes < 2) throw ValidationError("predictor needs at least 2 classes");
    PredictorSession s;
    s.pcfg = pcfg;
    s.tcfg = tcfg;
    s.d_speaker = d_speaker;
    s.recon_K = recon_K;
    pred::register_predictor(s.ps, pcfg, d_speaker, tcfg.seed);
    s.opt = AdamW<real>(static_cast<real>(tcfg.beta1), static_cast<real>(tcfg.beta2),
                        static_cast<real>(tcfg.adam_eps), static_cast<real>(tcfg.weight_decay));
    s.opt.ensure_size(s.ps);
    return s;
}

void save_predictor_checkpoint(const PredictorSession& s, const std::string& path) {
    std::vector<CheckpointEntry> entries;
    append_pred_meta(entries, s.pcfg, s.d_speaker, s.recon_K);
    PredictorSession& ms = const_cast<PredictorSession&>(s);
    AdamW<real> unused;
    append_params_and_opt(entries, s.ps, ms.opt, ms.opt, unused, false, s.step);
    write_checkpoint(path, entries);
}

PredictorSession load_predictor_session(const std::string& path, const PredTrainConfig& tcfg) {
    EntryMap map(read_checkpoint(path));
    int d_speaker = 0, recon_K = 7;
    pred::PredictorConfig pcfg = pred_meta_config(map, d_speaker, recon_K);
    PredictorSession s = make_predictor_session(pcfg, tcfg, d_speaker, recon_K);
    AdamW<real> unused;
    restore_params_and_opt(map, s.ps, s.opt, unused, false, s.step);
    return s;
}

std::vector<TokenizedDyad> tokenize_dyads(const std::vector<DyadContext>& dyads,
                                          ParamStore<real>& recon_ps,
                                          const pipeline::PipelineConfig& rcfg) {
    std::vector<TokenizedDyad> out;
    out.reserve(dyads.size());
    for (const DyadContext& dy : dyads) {
        dy.validate();
        int T = dy.listener.T();
        if (T % rcfg.window != 0)
            throw ValidationError("tokenize_dyads: listener length must be a multiple of " +
                                  std::to_string(rcfg.window));
        TokenizedDyad td;
        td.speaker = dy.speaker;
        td.audio = dy.audio;
        td.listener_classes.assign(T, 0);
        for (int t0 = 0; t0 < T; t0 += rcfg.window) {
            MotionSequence win;
            win.frames = Mat<real>(rcfg.window, dy.listener.d());
            win.frames.map() = dy.listener.frames.map().middleRows(t0, rcfg.window);
            win.fps = dy.listener.fps;
            win.schema = dy.listener.schema;
            std::vector<int> idx = pipeline::eval_keyframe_indices(win.frames, recon_ps, rcfg);
            quant::TokenSequence ts = pipeline::tokenize(win, idx, recon_ps, rcfg);
            for (int t = 0; t < rcfg.window; ++t) td.listener_classes[t0 + t] = ts.classes[t];
        }
        out.push_back(std::move(td));
    }
    return out;
}

namespace {

struct PredWindow {
    Mat<real> speaker;
    Mat<real> audio_mel;
    std::vector<int> past;
    std::vector<int> future_in;
    std::vector<int> target;
};

PredWindow extract_window(const TokenizedDyad& dy, const pred::PredictorConfig& cfg, int start,
                          bool with_audio) {
    int W = cfg.window();
    PredWindow w;
    w.speaker = Mat<real>(W, dy.speaker.d());
    w.speaker.map() = dy.speaker.frames.map().middleRows(start, W);
    if (with_audio && dy.audio.kind == AudioFeatures::Kind::kMel && dy.audio.mel.rows > 0) {
        w.audio_mel = Mat<real>(4 * W, 128);
        w.audio_mel.map() = dy.audio.mel.map().middleRows(4 * start, 4 * W);
    }
    w.past.assign(dy.listener_classes.begin() + start,
                  dy.listener_classes.begin() + start + cfg.past);
    w.future_in.assign(dy.listener_classes.begin() + start + cfg.past - 1,
                       dy.listener_classes.begin() + start + cfg.past - 1 + cfg.future);
    w.target.assign(dy.listener_classes.begin() + start + cfg.past,
                    dy.listener_classes.begin() + start + cfg.past + cfg.future);
    return w;
}

}  // namespace

PredTrainResult train_predictor(PredictorSession& s, const std::vector<TokenizedDyad>& data) {
    s.tcfg.validate();
    if (data.empty()) throw ValidationError("train_predictor: empty dataset");
    int W = s.pcfg.window();
    for (const TokenizedDyad& dy : data) {
        if (dy.speaker.T() < W || static_cast<int>(dy.listener_classes.size()) < W)
            throw ValidationError("train_predictor: dyad shorter than one window");
        if (dy.speaker.T() != static_cast<int>(dy.listener_classes.size()))
            throw ValidationError("train_predictor: speaker/listener length mismatch");
        if (dy.speaker.d() != s.d_speaker)
            throw DimensionError("train_predictor: speaker channel mismatch");
        for (int c : dy.listener_classes)
            if (c < 0 || c >= s.pcfg.num_classes)
                throw ValidationError(
                    "train_predictor: token class outside predictor vocabulary (codebook "
                    "mismatch?)");
    }

    const PredTrainConfig& cfg = s.tcfg;
    pred::ClassWeights weights = pred::ClassWeights::defaults(s.pcfg, s.recon_K);
    CsvLog log(cfg.log_csv, s.step == 0, "step,ce,dtw,total,lr");
    SFMS_INFO("predictor training: steps %ld..%ld over %zu dyad(s)", s.step, cfg.steps,
              data.size());

    PredTrainResult result;
    for (long step = s.step; step < cfg.steps; ++step) {
        double lr = cosine_lr(cfg.lr, step, cfg.horizon());
        ad::Graph<real> g;
        Binder<real> B(g, s.ps, true);

        double ce_c = 0, dtw_c = 0;
        std::vector<int> batch_ids;
        std::vector<std::string> detail;
        ad::V<real> loss_sum;
        for (int b = 0; b < cfg.batch; ++b) {
            int di = static_cast<int>(rng::derive(cfg.seed, "pdyad", step, b) % data.size());
            const TokenizedDyad& dy = data[di];
            int max_start = dy.speaker.T() - W;
            int start = max_start == 0
                            ? 0
                            : static_cast<int>(rng::derive(cfg.seed, "pstart", step, b) %
                                               static_cast<std::uint64_t>(max_start + 1));
            batch_ids.push_back(di);
            PredWindow w = extract_window(dy, s.pcfg, start, s.pcfg.use_audio);

            rng::Rng aug(rng::derive(cfg.seed, "pneutral", step, b));
            if (aug.uniform01() < s.pcfg.neutral_prob) {
                int span = s.pcfg.neutral_max - s.pcfg.neutral_min + 1;
                int L = s.pcfg.neutral_min + static_cast<int>(aug.uniform_int(span));
                for (int i = 0; i < L && i < s.pcfg.past; ++i) w.past[i] = 0;
            }

            pred::PredictorInput<real> in;
            in.speaker = std::move(w.speaker);
            in.audio_mel = std::move(w.audio_mel);
            in.past = std::move(w.past);
            in.future_in = std::move(w.future_in);
            ad::V<real> logits = pred::predict_logits(B, s.pcfg, g, in);
            pred::PredLoss<real> pl = pred::prediction_loss(logits, w.target, weights,
                                                            s.pcfg.dtw_weight, s.pcfg.dtw_gamma);
            ce_c += static_cast<double>(pl.ce.val()(0, 0));
            if (pl.dtw.valid()) dtw_c += static_cast<double>(pl.dtw.val()(0, 0));
            detail.push_back("dyad " + std::to_string(di) + " start " + std::to_string(start));
            loss_sum = (b == 0) ? pl.total : ad::add(loss_sum, pl.total);
        }

        ad::V<real> loss = ad::scale(loss_sum, static_cast<real>(1.0 / cfg.batch));
        double total = static_cast<double>(loss.val()(0, 0));
        if (!std::isfinite(total)) abort_nonfinite(cfg.log_csv, step, batch_ids, detail);

        g.backward(loss.id);
        B.for_each_grad([&](int idx, const Mat<real>& grad) {
            s.opt.apply(s.ps, idx, grad, static_cast<real>(lr), step + 1);
        });
        s.step = step + 1;

        log.row(std::to_string(step) + "," + fmt_double(ce_c / cfg.batch) + "," +
                fmt_double(dtw_c / cfg.batch) + "," + fmt_double(total) + "," + fmt_double(lr));

        if (result.steps_run == 0) result.first_loss = total;
        result.last_loss = total;
        ++result.steps_run;

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_out.empty() &&
            s.step % cfg.checkpoint_every == 0)
            save_predictor_checkpoint(s, cfg.checkpoint_out);
    }

    if (!cfg.checkpoint_out.empty()) save_predictor_checkpoint(s, cfg.checkpoint_out);
    return result;
}

PredEval eval_predictor(PredictorSession& s, const std::vector<TokenizedDyad>& data, int stride) {
    if (stride < 1) throw ValidationError("eval_predictor: stride must be >= 1");
    int W = s.pcfg.window();
    PredEval ev;
    long correct = 0, key_hits = 0;
    for (const TokenizedDyad& dy : data) {
        for (int start = 0; start + W <= dy.speaker.T(); start += stride) {
            PredWindow w = extract_window(dy, s.pcfg, start, s.pcfg.use_audio);
            ad::Graph<real> g;
            Binder<real> B(g, s.ps, false);
            pred::PredictorInput<real> in;
            in.speaker = std::move(w.speaker);
            in.audio_mel = std::move(w.audio_mel);
            in.past = std::move(w.past);
            in.future_in = std::move(w.future_in);
            ad::V<real> logits = pred::predict_logits(B, s.pcfg, g, in);
            const Mat<real>& lv = logits.val();
            for (int j = 0; j < s.pcfg.future; ++j) {
                int arg = 0;
                for (int c = 1; c < lv.cols; ++c)
                    if (lv(j, c) > lv(j, arg)) arg = c;
                ++ev.slots;
                if (arg == w.target[j]) ++correct;
                if (w.target[j] > 0) {
                    ++ev.keyframe_slots;
                    if (arg > 0) ++key_hits;
                }
            }
        }
    }
    if (ev.slots == 0) throw ValidationError("eval_predictor: no evaluation windows");
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.slots);
    ev.keyframe_recall = ev.keyframe_slots == 0
                             ? 0.0
                             : static_cast<double>(key_hits) / static_cast<double>(ev.keyframe_slots);
    return ev;
}

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open csv file: " + path);
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (first) {
            table.header = std::move(cells);
            first = false;
        } else {
            table.rows.push_back(std::move(cells));
        }
    }
    return table;
}

}  // namespace sfms::train
