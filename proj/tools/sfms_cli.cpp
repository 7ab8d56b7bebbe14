// Operator CLI: synthetic data generation, tokenizer/predictor training,
// reconstruction, autoregressive rollout, and benchmark evaluation.
//
// Exit codes: 0 success, 2 usage/validation, 3 numerical failure, 4 I/O.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "sfms/config.hpp"
#include "sfms/inpainter.hpp"
#include "sfms/metrics.hpp"
#include "sfms/motion_data.hpp"
#include "sfms/predictor.hpp"
#include "sfms/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfms;

namespace {

std::string pad4(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return buf;
}

void write_manifest(const std::string& dir, const std::vector<std::string>& lines) {
    std::ofstream f(dir + "/manifest.txt", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + dir);
    for (const std::string& l : lines) f << l << "\n";
}

std::vector<std::string> read_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.txt");
    if (!f) throw IoError("cannot read " + dir + "/manifest.txt");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

Mat<double> to_double(const Mat<real>& m) {
    Mat<double> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.size(); ++i) out.a[i] = static_cast<double>(m.a[i]);
    return out;
}

Mat<double> pool_frames(const std::vector<MotionSequence>& seqs) {
    int total = 0;
    for (const auto& s : seqs) total += s.T();
    Mat<double> out(total, seqs[0].d());
    int r = 0;
    for (const auto& s : seqs)
        for (int t = 0; t < s.T(); ++t, ++r)
            for (int c = 0; c < s.d(); ++c) out(r, c) = static_cast<double>(s.frames(t, c));
    return out;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int count = 16;
    int frames = 48;
    int dims = 8;
    int events = 5;
    int amp_levels = 0;
    double drift = 0.05;
    double fps = 30.0;
    std::string schema = "generic";
    std::uint64_t seed = 1;
};

void run_synth(const SynthArgs& a) {
    if (a.count < 0) throw ValidationError("synth: count must be >= 0");
    SynthSpec spec;
    spec.T = a.frames;
    spec.d = a.dims;
    spec.events = a.events;
    spec.amp_levels = a.amp_levels;
    spec.baseline_drift = static_cast<real>(a.drift);
    spec.fps = static_cast<real>(a.fps);
    SchemaId schema = schema_from_name(a.schema);

    fs::create_directories(a.out);
    std::vector<std::string> manifest;
    for (int i = 0; i < a.count; ++i) {
        SynthResult r = synth_sequence(spec, rng::derive(a.seed, "synth", i));
        r.seq.schema = schema;
        std::string stem = "seq_" + pad4(i);
        write_container(r.seq, a.out + "/" + stem + ".sfmc");
        write_sidecar(a.out + "/" + stem + ".events.json", r.seq, r.events);
        manifest.push_back(stem + ".sfmc");
    }
    write_manifest(a.out, manifest);
    std::printf("wrote %d sequence(s) to %s\n", a.count, a.out.c_str());
}

// ---------------------------------------------------------------------------
// synth-dyads
// ---------------------------------------------------------------------------

struct SynthDyadArgs {
    std::string out;
    int count = 8;
    int frames = 192;
    int dims = 8;
    int events = 5;
    std::string rule = "copy_lag";
    int lag = 4;
    int response_channel = 0;
    double response_amp = 1.0;
    bool no_audio = false;
    std::uint64_t seed = 1;
};

void run_synth_dyads(const SynthDyadArgs& a) {
    if (a.count < 0) throw ValidationError("synth-dyads: count must be >= 0");
    SynthDyadSpec spec;
    spec.speaker.T = a.frames;
    spec.speaker.d = a.dims;
    spec.speaker.events = a.events;
    if (a.rule == "copy_lag")
        spec.rule = DyadRule::kCopyLag;
    else if (a.rule == "event_response")
        spec.rule = DyadRule::kEventResponse;
    else
        throw ValidationError("synth-dyads: unknown rule '" + a.rule + "'");
    spec.lag = a.lag;
    spec.response_channel = a.response_channel;
    spec.response_amp = static_cast<real>(a.response_amp);
    spec.with_audio = !a.no_audio;

    fs::create_directories(a.out);
    std::vector<std::string> manifest;
    for (int i = 0; i < a.count; ++i) {
        DyadResult r = make_dyad(spec, rng::derive(a.seed, "dyad", i));
        std::string stem = "dyad_" + pad4(i);
        write_container(r.dyad.speaker, a.out + "/" + stem + ".speaker.sfmc");
        write_container(r.dyad.listener, a.out + "/" + stem + ".listener.sfmc");
        MotionSequence mel;
        mel.frames = r.dyad.audio.mel;
        mel.fps = r.dyad.speaker.fps * 4;
        write_container(mel, a.out + "/" + stem + ".mel.sfmc");
        write_sidecar(a.out + "/" + stem + ".events.json", r.dyad.speaker, r.speaker_events);
        manifest.push_back(stem);
    }
    write_manifest(a.out, manifest);
    std::printf("wrote %d dyad(s) to %s\n", a.count, a.out.c_str());
}

std::vector<DyadContext> load_dyads(const std::string& dir) {
    std::vector<DyadContext> out;
    for (const std::string& stem : read_manifest(dir)) {
        DyadContext dy;
        dy.speaker = read_container(dir + "/" + stem + ".speaker.sfmc");
        dy.listener = read_container(dir + "/" + stem + ".listener.sfmc");
        MotionSequence mel = read_container(dir + "/" + stem + ".mel.sfmc");
        dy.audio.kind = AudioFeatures::Kind::kMel;
        dy.audio.mel = mel.frames;
        dy.validate();
        out.push_back(std::move(dy));
    }
    SFMS_INFO("loaded %zu dyad(s) from %s", out.size(), dir.c_str());
    return out;
}

// ---------------------------------------------------------------------------
// train-recon
// ---------------------------------------------------------------------------

std::vector<int> parse_levels(const std::string& text) {
    std::vector<int> out;
    std::string cur;
    for (char ch : text + ",") {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

AnnealShape shape_from_name(const std::string& name) {
    if (name == "exponential") return AnnealShape::kExponential;
    if (name == "linear") return AnnealShape::kLinear;
    if (name == "cosine") return AnnealShape::kCosine;
    throw ValidationError("unknown anneal schedule '" + name + "'");
}

std::vector<MotionSequence> load_windows(const std::string& dir, int window) {
    std::vector<MotionSequence> out;
    for (const std::string& name : read_manifest(dir)) {
        MotionSequence seq = read_container(dir + "/" + name);
        if (seq.T() % window != 0)
            throw ValidationError(name + ": length " + std::to_string(seq.T()) +
                                  " is not a multiple of the window " + std::to_string(window));
        for (int t0 = 0; t0 < seq.T(); t0 += window) {
            MotionSequence w;
            w.frames = Mat<real>(window, seq.d());
            w.frames.map() = seq.frames.map().middleRows(t0, window);
            w.fps = seq.fps;
            w.schema = seq.schema;
            out.push_back(std::move(w));
        }
    }
    SFMS_INFO("loaded %zu training window(s) from %s", out.size(), dir.c_str());
    return out;
}

struct TrainReconArgs {
    std::string config;
    bool resume = false;
    int workers = 1;
};

void run_train_recon(const TrainReconArgs& a) {
    KvConfig cfg = KvConfig::load(a.config);
    std::string data_dir = cfg.get_string("data", "");
    if (data_dir.empty()) throw ValidationError("config missing required key 'data'");

    pipeline::PipelineConfig pcfg;
    pcfg.mode = pipeline::mode_from_name(cfg.get_string("mode", "dynamic"));
    pcfg.d = cfg.get_int("d", pcfg.d);
    pcfg.K = cfg.get_int("K", pcfg.K);
    pcfg.window = cfg.get_int("window", pcfg.window);
    pcfg.stack.model_dim = cfg.get_int("model_dim", pcfg.stack.model_dim);
    pcfg.stack.heads = cfg.get_int("heads", pcfg.stack.heads);
    pcfg.stack.layers = cfg.get_int("layers", pcfg.stack.layers);
    pcfg.stack.ffn = cfg.get_int("ffn", pcfg.stack.ffn);
    pcfg.conv_kernel = cfg.get_int("conv_kernel", pcfg.conv_kernel);
    pcfg.conv_out = cfg.get_int("conv_out", pcfg.conv_out);
    std::string quant = cfg.get_string("quant", "fsq");
    if (quant == "vq")
        pcfg.quant.kind = quant::Kind::kVq;
    else if (quant == "fsq")
        pcfg.quant.kind = quant::Kind::kFsq;
    else
        throw ValidationError("unknown quantizer kind '" + quant + "'");
    pcfg.quant.vq_size = cfg.get_int("vq_size", pcfg.quant.vq_size);
    pcfg.quant.fsq_levels = parse_levels(cfg.get_string("fsq_levels", "4,4,4,4"));

    train::TrainConfig tcfg;
    tcfg.steps = cfg.get_long("steps", tcfg.steps);
    tcfg.schedule_steps = cfg.get_long("schedule_steps", tcfg.schedule_steps);
    tcfg.batch = cfg.get_int("batch", tcfg.batch);
    tcfg.samples_per_seq = cfg.get_int("samples_per_seq", tcfg.samples_per_seq);
    tcfg.lr_main = cfg.get_double("lr_main", tcfg.lr_main);
    tcfg.lr_logits = cfg.get_double("lr_logits", tcfg.lr_logits);
    tcfg.beta1 = cfg.get_double("beta1", tcfg.beta1);
    tcfg.beta2 = cfg.get_double("beta2", tcfg.beta2);
    tcfg.adam_eps = cfg.get_double("adam_eps", tcfg.adam_eps);
    tcfg.weight_decay = cfg.get_double("weight_decay", tcfg.weight_decay);
    tcfg.alpha = cfg.get_double("alpha", tcfg.alpha);
    tcfg.nll_weight = cfg.get_double("nll_weight", tcfg.nll_weight);
    tcfg.tau_start = cfg.get_double("tau_start", tcfg.tau_start);
    tcfg.tau_end = cfg.get_double("tau_end", tcfg.tau_end);
    tcfg.tau_shape = shape_from_name(cfg.get_string("tau_shape", "exponential"));
    tcfg.seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));
    tcfg.checkpoint_every = cfg.get_long("checkpoint_every", tcfg.checkpoint_every);
    tcfg.checkpoint_out = cfg.get_string("checkpoint_out", "");
    tcfg.log_csv = cfg.get_string("log_csv", "");

    train::SparsityAblationConfig ab;
    ab.enabled = cfg.get_bool("sparsity_enabled", false);
    ab.K_target = cfg.get_int("sparsity_k", ab.K_target);
    ab.weight = cfg.get_double("sparsity_weight", ab.weight);
    cfg.reject_unknown_keys();

    if (a.resume && tcfg.checkpoint_out.empty())
        throw ValidationError("--resume requires checkpoint_out in the config");

    std::vector<MotionSequence> data = load_windows(data_dir, pcfg.window);
    train::ReconSession session = a.resume ? train::load_recon_session(tcfg.checkpoint_out, tcfg, ab)
                                           : train::make_recon_session(pcfg, tcfg, ab);
    train::TrainResult res = train::train_recon(session, data);
    std::printf("mode=%s steps_run=%ld first_total=%.6g last_total=%.6g\n",
                pipeline::mode_name(session.pcfg.mode), res.steps_run, res.first.total,
                res.last.total);
    (void)a.workers;  // data loading is single-threaded; results never depend on it
}

// ---------------------------------------------------------------------------
// train-pred
// ---------------------------------------------------------------------------

struct TrainPredArgs {
    std::string config;
    std::string recon_ckpt;
    bool resume = false;
    int workers = 1;
};

void run_train_pred(const TrainPredArgs& a) {
    KvConfig cfg = KvConfig::load(a.config);
    std::string data_dir = cfg.get_string("data", "");
    if (data_dir.empty()) throw ValidationError("config missing required key 'data'");

    train::ReconModel recon = train::load_recon_model(a.recon_ckpt);

    pred::PredictorConfig pcfg;
    pcfg.past = cfg.get_int("past", pcfg.past);
    pcfg.future = cfg.get_int("future", pcfg.future);
    pcfg.num_classes = cfg.get_int("num_classes", recon.pcfg.quant.codebook_size() + 1);
    pcfg.stack.model_dim = cfg.get_int("model_dim", pcfg.stack.model_dim);
    pcfg.stack.heads = cfg.get_int("heads", pcfg.stack.heads);
    pcfg.stack.layers = cfg.get_int("layers", pcfg.stack.layers);
    pcfg.stack.ffn = cfg.get_int("ffn", pcfg.stack.ffn);
    pcfg.use_audio = cfg.get_bool("use_audio", pcfg.use_audio);
    pcfg.audio_kernel = cfg.get_int("audio_kernel", pcfg.audio_kernel);
    pcfg.audio_vocab = cfg.get_int("audio_vocab", pcfg.audio_vocab);
    pcfg.w0 = cfg.get_double("w0", pcfg.w0);
    pcfg.w_key = cfg.get_double("w_key", pcfg.w_key);
    pcfg.dtw_weight = cfg.get_double("dtw_weight", pcfg.dtw_weight);
    pcfg.dtw_gamma = cfg.get_double("dtw_gamma", pcfg.dtw_gamma);
    pcfg.neutral_prob = cfg.get_double("neutral_prob", pcfg.neutral_prob);
    pcfg.neutral_min = cfg.get_int("neutral_min", pcfg.neutral_min);
    pcfg.neutral_max = cfg.get_int("neutral_max", pcfg.neutral_max);

    train::PredTrainConfig tcfg;
    tcfg.steps = cfg.get_long("steps", tcfg.steps);
    tcfg.schedule_steps = cfg.get_long("schedule_steps", tcfg.schedule_steps);
    tcfg.batch = cfg.get_int("batch", tcfg.batch);
    tcfg.lr = cfg.get_double("lr", tcfg.lr);
    tcfg.beta1 = cfg.get_double("beta1", tcfg.beta1);
    tcfg.beta2 = cfg.get_double("beta2", tcfg.beta2);
    tcfg.adam_eps = cfg.get_double("adam_eps", tcfg.adam_eps);
    tcfg.weight_decay = cfg.get_double("weight_decay", tcfg.weight_decay);
    tcfg.seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));
    tcfg.checkpoint_every = cfg.get_long("checkpoint_every", tcfg.checkpoint_every);
    tcfg.checkpoint_out = cfg.get_string("checkpoint_out", "");
    tcfg.log_csv = cfg.get_string("log_csv", "");
    int eval_stride = cfg.get_int("eval_stride", 0);
    cfg.reject_unknown_keys();

    if (a.resume && tcfg.checkpoint_out.empty())
        throw ValidationError("--resume requires checkpoint_out in the config");

    std::vector<DyadContext> dyads = load_dyads(data_dir);
    if (dyads.empty()) throw ValidationError("train-pred: no dyads in " + data_dir);
    std::vector<train::TokenizedDyad> tokenized =
        train::tokenize_dyads(dyads, recon.ps, recon.pcfg);

    train::PredictorSession session =
        a.resume ? train::load_predictor_session(tcfg.checkpoint_out, tcfg)
                 : train::make_predictor_session(pcfg, tcfg, dyads[0].speaker.d(),
                                                 recon.pcfg.K);
    train::PredTrainResult res = train::train_predictor(session, tokenized);
    std::printf("steps_run=%ld first_loss=%.6g last_loss=%.6g\n", res.steps_run, res.first_loss,
                res.last_loss);
    if (eval_stride > 0) {
        train::PredEval ev = train::eval_predictor(session, tokenized, eval_stride);
        std::printf("train_accuracy=%.4f keyframe_recall=%.4f slots=%ld\n", ev.accuracy,
                    ev.keyframe_recall, ev.slots);
    }
    (void)a.workers;
}

// ---------------------------------------------------------------------------
// tokenize / reconstruct
// ---------------------------------------------------------------------------

struct TokenizeArgs {
    std::string ckpt, in, out;
};

void run_tokenize(const TokenizeArgs& a) {
    train::ReconModel model = train::load_recon_model(a.ckpt);
    MotionSequence seq = read_container(a.in);
    seq.validate();
    if (seq.T() % model.pcfg.window != 0)
        throw ValidationError("tokenize: length must be a multiple of the window");
    quant::TokenSequence full;
    full.length = seq.T();
    full.classes.assign(seq.T(), 0);
    full.codebook_kind = model.pcfg.quant.kind;
    full.codebook_size = model.pcfg.quant.codebook_size();
    for (int t0 = 0; t0 < seq.T(); t0 += model.pcfg.window) {
        MotionSequence win;
        win.frames = Mat<real>(model.pcfg.window, seq.d());
        win.frames.map() = seq.frames.map().middleRows(t0, model.pcfg.window);
        win.fps = seq.fps;
        win.schema = seq.schema;
        std::vector<int> idx = pipeline::eval_keyframe_indices(win.frames, model.ps, model.pcfg);
        quant::TokenSequence ts = pipeline::tokenize(win, idx, model.ps, model.pcfg);
        for (int t = 0; t < model.pcfg.window; ++t) full.classes[t0 + t] = ts.classes[t];
    }
    quant::write_tokens(a.out, full);
    std::printf("wrote %d token(s) to %s\n", full.length, a.out.c_str());
}

struct ReconstructArgs {
    std::string ckpt, in, out, tokens, report;
};

void run_reconstruct(const ReconstructArgs& a) {
    train::ReconModel model = train::load_recon_model(a.ckpt);
    MotionSequence seq = read_container(a.in);
    pipeline::ReconOutput out = pipeline::reconstruct(seq, model.ps, model.pcfg, model.alpha);
    write_container(out.recon, a.out);
    if (!a.tokens.empty()) quant::write_tokens(a.tokens, out.tokens);
    std::printf("motion_l2=%.6g quant=%.6g total=%.6g\n", out.report.motion_l2,
                out.report.quant_codebook + out.report.quant_commit, out.report.total);
    if (!a.report.empty()) {
        json j;
        j["motion_l2"] = out.report.motion_l2;
        j["quant_codebook"] = out.report.quant_codebook;
        j["quant_commit"] = out.report.quant_commit;
        j["mask_loss"] = out.report.mask_loss;
        j["alpha"] = out.report.alpha;
        j["total"] = out.report.total;
        std::ofstream f(a.report, std::ios::trunc);
        if (!f) throw IoError("cannot write report: " + a.report);
        f << j.dump(2) << "\n";
    }
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

struct RolloutArgs {
    std::string pred_ckpt, recon_ckpt, speaker, prefix, audio;
    int horizon = 48;
    std::string mode = "greedy";
    double temperature = 1.0;
    std::uint64_t seed = 1;
    std::string out_motion, out_tokens;
};

void run_rollout(const RolloutArgs& a) {
    train::PredictorSession ps = train::load_predictor_session(a.pred_ckpt, {});
    train::ReconModel recon = train::load_recon_model(a.recon_ckpt);
    DyadContext ctx;
    ctx.speaker = read_container(a.speaker);
    ctx.listener = read_container(a.prefix);
    if (!a.audio.empty()) {
        MotionSequence mel = read_container(a.audio);
        ctx.audio.kind = AudioFeatures::Kind::kMel;
        ctx.audio.mel = mel.frames;
    }
    pred::RolloutMode mode;
    if (a.mode == "greedy")
        mode = pred::RolloutMode::kGreedy;
    else if (a.mode == "sample")
        mode = pred::RolloutMode::kSample;
    else
        throw ValidationError("rollout: unknown mode '" + a.mode + "'");

    pred::RolloutResult r = pred::rollout(ctx, ps.ps, ps.pcfg, recon.ps, recon.pcfg, a.horizon,
                                          mode, a.temperature, a.seed);
    if (!a.out_motion.empty()) write_container(r.motion, a.out_motion);
    if (!a.out_tokens.empty()) quant::write_tokens(a.out_tokens, r.tokens);
    int keyframes = 0;
    for (int c : r.tokens.classes)
        if (c > 0) ++keyframes;
    std::printf("generated %d frame(s), %d keyframe token(s)\n", a.horizon, keyframes);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string gen, gt, speaker;
    std::string suite = "l2l";
    std::string out = "report.json";
    bool plots = false;
    std::uint64_t seed = 1;
};

std::vector<MotionSequence> load_all(const std::string& dir) {
    std::vector<MotionSequence> out;
    for (const std::string& name : read_manifest(dir)) out.push_back(read_container(dir + "/" + name));
    return out;
}

void check_paired(const std::vector<MotionSequence>& gen, const std::vector<MotionSequence>& gt,
                  const std::vector<MotionSequence>& spk, const std::vector<std::string>& names) {
    std::string diag;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        if (gen[i].T() != gt[i].T() || gen[i].d() != gt[i].d())
            diag += names[i] + ": gen " + std::to_string(gen[i].T()) + "x" +
                    std::to_string(gen[i].d()) + " vs gt " + std::to_string(gt[i].T()) + "x" +
                    std::to_string(gt[i].d()) + "\n";
        else if (gen[i].T() != spk[i].T())
            diag += names[i] + ": speaker length " + std::to_string(spk[i].T()) + " != " +
                    std::to_string(gen[i].T()) + "\n";
    }
    if (!diag.empty()) throw ValidationError("eval: per-file mismatches:\n" + diag);
}

double mean_temporal_variance(const std::vector<MotionSequence>& seqs) {
    double acc = 0;
    for (const auto& s : seqs) {
        double chan = 0;
        for (int c = 0; c < s.d(); ++c) {
            double mu = 0;
            for (int t = 0; t < s.T(); ++t) mu += s.frames(t, c);
            mu /= s.T();
            double v = 0;
            for (int t = 0; t < s.T(); ++t)
                v += (s.frames(t, c) - mu) * (s.frames(t, c) - mu);
            chan += v / (s.T() - 1);
        }
        acc += chan / s.d();
    }
    return acc / seqs.size();
}

void run_eval(const EvalArgs& a) {
    std::vector<std::string> names = read_manifest(a.gen);
    std::vector<MotionSequence> gen = load_all(a.gen);
    std::vector<MotionSequence> gt = load_all(a.gt);
    std::vector<MotionSequence> spk = load_all(a.speaker);
    if (gen.empty()) throw ValidationError("eval: no sequences in " + a.gen);
    if (gen.size() != gt.size() || gen.size() != spk.size())
        throw ValidationError("eval: set sizes differ (gen " + std::to_string(gen.size()) +
                              ", gt " + std::to_string(gt.size()) + ", speaker " +
                              std::to_string(spk.size()) + ")");
    check_paired(gen, gt, spk, names);

    std::vector<metrics::MetricReport> reports;
    std::vector<std::pair<std::string, std::vector<double>>> plot_series;
    std::string plot_title;

    if (a.suite == "l2l") {
        std::vector<double> per_seq;
        for (std::size_t i = 0; i < gen.size(); ++i)
            per_seq.push_back(metrics::l2_to_gt(to_double(gen[i].frames), to_double(gt[i].frames)));
        double l2 = 0;
        for (double v : per_seq) l2 += v;
        reports.push_back({"L2", l2 / per_seq.size(), false, {}});

        Mat<double> pg = pool_frames(gen), pt = pool_frames(gt), sp = pool_frames(spk);
        metrics::FdResult fd = metrics::frechet_distance(pg, pt);
        reports.push_back({"FD", fd.value, fd.degenerate, {}});

        reports.push_back({"Var",
                           mean_temporal_variance(gen),
                           false,
                           {{"gt", mean_temporal_variance(gt)}}});

        int k = std::min(15, pg.rows);
        reports.push_back({"SI",
                           metrics::shannon_index(pg, k, a.seed),
                           false,
                           {{"gt", metrics::shannon_index(pt, k, a.seed)}, {"k", double(k)}}});

        metrics::FdResult pfd = metrics::paired_fd(pg, sp, pt);
        reports.push_back({"P-FD", pfd.value, pfd.degenerate, {}});

        double rp = 0;
        bool rp_deg = false;
        for (std::size_t i = 0; i < gen.size(); ++i) {
            metrics::RpccResult lip = metrics::rpcc(metrics::lip_curvature(gen[i]),
                                                    metrics::lip_curvature(gt[i]),
                                                    metrics::lip_curvature(spk[i]));
            metrics::RpccResult head = metrics::rpcc(metrics::head_motion(gen[i]),
                                                     metrics::head_motion(gt[i]),
                                                     metrics::head_motion(spk[i]));
            rp += 0.5 * (lip.value + head.value);
            rp_deg = rp_deg || (lip.degenerate && head.degenerate);
        }
        reports.push_back({"RPCC", rp / gen.size(), rp_deg, {}});

        plot_series = {{"L2 per sequence", per_seq}};
        plot_title = "per-sequence distance to ground truth";
    } else if (a.suite == "react") {
        double corr = 0, dist = 0;
        bool corr_deg = false;
        for (std::size_t i = 0; i < gen.size(); ++i) {
            metrics::CccResult c = metrics::ccc(to_double(gen[i].frames), to_double(gt[i].frames));
            corr += c.value;
            corr_deg = corr_deg || c.degenerate;
            dist += metrics::l2_to_gt(to_double(gen[i].frames), to_double(gt[i].frames));
        }
        reports.push_back({"FRCorr", corr / gen.size(), corr_deg, {}});
        reports.push_back({"FRDist", dist / gen.size(), false, {}});

        std::vector<std::vector<Mat<double>>> grid(1);
        for (const auto& s : gen) grid[0].push_back(to_double(s.frames));
        metrics::FrDiversity div = metrics::fr_diversity(grid);
        reports.push_back({"FRDiv", div.frdiv, false, {}});
        reports.push_back({"FRVar", div.frvar, false, {}});
        reports.push_back({"FRDvs", div.frdvs, false, {}});

        metrics::FdResult rea = metrics::frechet_distance(pool_frames(gen), pool_frames(gt));
        reports.push_back({"FRRea", rea.value, rea.degenerate, {}});

        int max_lag = std::min(8, gen[0].T() - 2);
        double peak = 0, lag_mean = 0;
        std::vector<double> curve_mean(2 * max_lag + 1, 0.0);
        for (std::size_t i = 0; i < gen.size(); ++i) {
            metrics::TlccResult t =
                metrics::tlcc(metrics::head_motion(spk[i]), metrics::head_motion(gen[i]), max_lag);
            peak += t.curve[t.peak_lag + max_lag];
            lag_mean += t.peak_lag;
            for (std::size_t j = 0; j < curve_mean.size(); ++j) curve_mean[j] += t.curve[j];
        }
        for (double& v : curve_mean) v /= gen.size();
        reports.push_back({"FRSyn",
                           peak / gen.size(),
                           false,
                           {{"mean_peak_lag", lag_mean / gen.size()}}});

        plot_series = {{"mean TLCC", curve_mean}};
        plot_title = "speaker-listener cross correlation by lag";
    } else {
        throw ValidationError("eval: unknown suite '" + a.suite + "' (expected l2l or react)");
    }

    json j;
    j["suite"] = a.suite;
    j["count"] = gen.size();
    j["metrics"] = json::array();
    for (const auto& r : reports) {
        json m;
        m["name"] = r.name;
        m["value"] = r.value;
        m["degenerate"] = r.degenerate;
        m["details"] = r.details;
        j["metrics"].push_back(m);
    }
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw IoError("cannot write report: " + a.out);
    f << j.dump(2) << "\n";
    f.close();

    std::string stem = a.out;
    if (stem.size() > 5 && stem.substr(stem.size() - 5) == ".json") stem.resize(stem.size() - 5);
    std::ofstream csv(stem + ".csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write report: " + stem + ".csv");
    csv << "name,value,degenerate\n";
    for (const auto& r : reports) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        csv << r.name << "," << buf << "," << (r.degenerate ? 1 : 0) << "\n";
    }
    csv.close();

    if (a.plots) metrics::write_line_plot(stem + ".svg", plot_title, plot_series);

    for (const auto& r : reports) std::printf("%-8s %.6g%s\n", r.name.c_str(), r.value,
                                              r.degenerate ? " (degenerate)" : "");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse facial motion structure toolkit"};
    app.require_subcommand(1);

    SynthArgs synth;
    CLI::App* s1 = app.add_subcommand("synth", "generate synthetic motion sequences");
    s1->add_option("--out", synth.out, "output directory")->required();
    s1->add_option("--count", synth.count, "number of sequences");
    s1->add_option("--frames", synth.frames, "frames per sequence");
    s1->add_option("--dims", synth.dims, "motion channels");
    s1->add_option("--events", synth.events, "events per sequence");
    s1->add_option("--amp-levels", synth.amp_levels, "snap amplitudes to this many levels");
    s1->add_option("--drift", synth.drift, "baseline drift magnitude");
    s1->add_option("--fps", synth.fps, "frame rate");
    s1->add_option("--schema", synth.schema, "feature schema name");
    s1->add_option("--seed", synth.seed, "root seed");
    s1->callback([&] { run_synth(synth); });

    SynthDyadArgs sdy;
    CLI::App* s2 = app.add_subcommand("synth-dyads", "generate speaker-listener dyads");
    s2->add_option("--out", sdy.out, "output directory")->required();
    s2->add_option("--count", sdy.count, "number of dyads");
    s2->add_option("--frames", sdy.frames, "frames per track");
    s2->add_option("--dims", sdy.dims, "motion channels");
    s2->add_option("--events", sdy.events, "speaker events");
    s2->add_option("--rule", sdy.rule, "listener rule: copy_lag or event_response");
    s2->add_option("--lag", sdy.lag, "listener response lag in frames");
    s2->add_option("--response-channel", sdy.response_channel, "listener response channel");
    s2->add_option("--response-amp", sdy.response_amp, "listener response amplitude");
    s2->add_flag("--no-audio", sdy.no_audio, "emit silent mel features");
    s2->add_option("--seed", sdy.seed, "root seed");
    s2->callback([&] { run_synth_dyads(sdy); });

    TrainReconArgs tr;
    CLI::App* s3 = app.add_subcommand("train-recon", "train the sparse reconstruction pipeline");
    s3->add_option("--config", tr.config, "key=value config file")->required();
    s3->add_flag("--resume", tr.resume, "resume from checkpoint_out");
    s3->add_option("--workers", tr.workers, "data loading workers (results independent)");
    s3->callback([&] { run_train_recon(tr); });

    TrainPredArgs tp;
    CLI::App* s4 = app.add_subcommand("train-pred", "train the listener token predictor");
    s4->add_option("--config", tp.config, "key=value config file")->required();
    s4->add_option("--recon-ckpt", tp.recon_ckpt, "frozen tokenizer checkpoint")->required();
    s4->add_flag("--resume", tp.resume, "resume from checkpoint_out");
    s4->add_option("--workers", tp.workers, "data loading workers (results independent)");
    s4->callback([&] { run_train_pred(tp); });

    TokenizeArgs tk;
    CLI::App* s5 = app.add_subcommand("tokenize", "tokenize a motion sequence");
    s5->add_option("--recon-ckpt", tk.ckpt, "tokenizer checkpoint")->required();
    s5->add_option("--in", tk.in, "input container")->required();
    s5->add_option("--out", tk.out, "output token json")->required();
    s5->callback([&] { run_tokenize(tk); });

    ReconstructArgs rc;
    CLI::App* s6 = app.add_subcommand("reconstruct", "reconstruct a sequence through the pipeline");
    s6->add_option("--recon-ckpt", rc.ckpt, "tokenizer checkpoint")->required();
    s6->add_option("--in", rc.in, "input container")->required();
    s6->add_option("--out", rc.out, "output container")->required();
    s6->add_option("--tokens", rc.tokens, "also write the token sequence here");
    s6->add_option("--report", rc.report, "also write a loss report json here");
    s6->callback([&] { run_reconstruct(rc); });

    RolloutArgs ro;
    CLI::App* s7 = app.add_subcommand("rollout", "autoregressively generate listener motion");
    s7->add_option("--pred-ckpt", ro.pred_ckpt, "predictor checkpoint")->required();
    s7->add_option("--recon-ckpt", ro.recon_ckpt, "tokenizer checkpoint")->required();
    s7->add_option("--speaker", ro.speaker, "speaker track container")->required();
    s7->add_option("--prefix", ro.prefix, "listener prefix container")->required();
    s7->add_option("--audio", ro.audio, "speaker mel container");
    s7->add_option("--horizon", ro.horizon, "frames to generate");
    s7->add_option("--mode", ro.mode, "greedy or sample");
    s7->add_option("--temperature", ro.temperature, "sampling temperature");
    s7->add_option("--seed", ro.seed, "sampling seed");
    s7->add_option("--out-motion", ro.out_motion, "write decoded motion here");
    s7->add_option("--out-tokens", ro.out_tokens, "write generated tokens here");
    s7->callback([&] { run_rollout(ro); });

    EvalArgs ev;
    CLI::App* s8 = app.add_subcommand("eval", "compute a benchmark metric suite");
    s8->add_option("--gen", ev.gen, "generated set directory")->required();
    s8->add_option("--gt", ev.gt, "ground truth set directory")->required();
    s8->add_option("--speaker", ev.speaker, "speaker set directory")->required();
    s8->add_option("--suite", ev.suite, "l2l or react");
    s8->add_option("--out", ev.out, "report json path");
    s8->add_flag("--plots", ev.plots, "emit figures next to the report");
    s8->add_option("--seed", ev.seed, "seed for seeded metrics");
    s8->callback([&] { run_eval(ev); });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 4;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
}
