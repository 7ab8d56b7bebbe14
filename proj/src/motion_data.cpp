#include "sfms/motion_data.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "sfms/binio.hpp"

namespace sfms {

namespace {
constexpr char kMagic[4] = {'S', 'F', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr double kPi = 3.14159265358979323846;
}  // namespace

FeatureSchema schema_for(SchemaId id, int d) {
    switch (id) {
        case SchemaId::kGeneric:
            return {id, d, 0};
        case SchemaId::kDeca56:
            return {id, 50, 6};
        case SchemaId::kFaceverse58:
            return {id, 52, 6};
    }
    throw ValidationError("unknown schema id");
}

const char* schema_name(SchemaId id) {
    switch (id) {
        case SchemaId::kGeneric:
            return "generic";
        case SchemaId::kDeca56:
            return "deca56";
        case SchemaId::kFaceverse58:
            return "faceverse58";
    }
    return "?";
}

SchemaId schema_from_name(const std::string& name) {
    if (name == "generic") return SchemaId::kGeneric;
    if (name == "deca56") return SchemaId::kDeca56;
    if (name == "faceverse58") return SchemaId::kFaceverse58;
    throw ValidationError("unknown schema name: " + name);
}

void MotionSequence::validate() const {
    if (frames.rows < 1 || frames.cols < 1)
        throw ValidationError("motion sequence needs T >= 1 and d >= 1");
    if (!frames.all_finite()) throw ValidationError("motion sequence contains non-finite values");
    if (!(fps > 0)) throw ValidationError("fps must be positive");
    if (schema == SchemaId::kDeca56 && frames.cols != 56)
        throw ValidationError("deca56 schema requires d = 56");
    if (schema == SchemaId::kFaceverse58 && frames.cols != 58)
        throw ValidationError("faceverse58 schema requires d = 58");
}

void AudioFeatures::validate(int video_frames) const {
    if (kind == Kind::kMel) {
        if (mel.rows != 4 * video_frames || mel.cols != 128)
            throw ValidationError("mel features must be (4T) x 128 for the paired video");
        if (!mel.all_finite()) throw ValidationError("mel features contain non-finite values");
    } else {
        if (tokens.empty()) throw ValidationError("token audio stream is empty");
        for (int t : tokens)
            if (t < 0) throw ValidationError("audio token ids must be >= 0");
    }
}

void DyadContext::validate() const {
    listener.validate();
    speaker.validate();
    if (listener.T() != speaker.T())
        throw ValidationError("listener and speaker lengths differ");
    audio.validate(speaker.T());
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

// Adds a raised-cosine bump to one channel (accumulative).
void add_bump(Mat<real>& frames, const Event& e) {
    for (int t = e.onset; t <= e.offset; ++t) {
        if (t < 0 || t >= frames.rows) continue;
        double v;
        if (t <= e.apex) {
            double denom = std::max(1, e.apex - e.onset);
            v = 0.5 * (1.0 - std::cos(kPi * (t - e.onset) / denom));
        } else {
            double denom = std::max(1, e.offset - e.apex);
            v = 0.5 * (1.0 + std::cos(kPi * (t - e.apex) / denom));
        }
        frames(t, e.channel) += static_cast<real>(e.amplitude * v);
    }
}

std::vector<Event> draw_events(const SynthSpec& spec, rng::Rng& r) {
    std::vector<Event> events;
    events.reserve(spec.events);
    for (int i = 0; i < spec.events; ++i) {
        Event e;
        e.channel = static_cast<int>(r.uniform_int(spec.d));
        int hw1 = spec.min_halfwidth +
                  static_cast<int>(r.uniform_int(spec.max_halfwidth - spec.min_halfwidth + 1));
        int hw2 = spec.min_halfwidth +
                  static_cast<int>(r.uniform_int(spec.max_halfwidth - spec.min_halfwidth + 1));
        int lo = hw1, hi = spec.T - 1 - hw2;
        if (hi < lo) {
            lo = spec.T / 2;
            hi = spec.T / 2;
        }
        e.apex = lo + static_cast<int>(r.uniform_int(hi - lo + 1));
        e.onset = std::max(0, e.apex - hw1);
        e.offset = std::min(spec.T - 1, e.apex + hw2);
        if (spec.amp_levels > 0) {
            e.cls = static_cast<int>(r.uniform_int(spec.amp_levels));
            double step = spec.amp_levels == 1
                              ? 0.0
                              : (spec.amp_hi - spec.amp_lo) / (spec.amp_levels - 1);
            e.amplitude = static_cast<real>(spec.amp_lo + step * e.cls);
        } else {
            e.amplitude = static_cast<real>(r.uniform(spec.amp_lo, spec.amp_hi));
        }
        events.push_back(e);
    }
    return events;
}

void add_baseline(Mat<real>& frames, const SynthSpec& spec, rng::Rng& r) {
    if (spec.baseline_drift <= 0) return;
    for (int c = 0; c < spec.d; ++c) {
        double freq = r.uniform(0.5, 1.5);
        double phase = r.uniform(0.0, 2.0 * kPi);
        double amp = r.uniform(0.0, spec.baseline_drift);
        for (int t = 0; t < spec.T; ++t)
            frames(t, c) += static_cast<real>(
                amp * std::sin(2.0 * kPi * freq * t / spec.T + phase));
    }
}

}  // namespace

SynthResult synth_sequence(const SynthSpec& spec, std::uint64_t seed) {
    if (spec.T < 1 || spec.d < 1) throw ValidationError("synth spec needs T >= 1, d >= 1");
    if (spec.events > spec.T) throw ValidationError("synth spec: more events than frames");
    if (spec.events < 0) throw ValidationError("synth spec: negative event count");

    rng::Rng r(rng::derive(seed, "synth"));
    SynthResult out;
    out.seq.frames = Mat<real>::zeros(spec.T, spec.d);
    out.seq.fps = spec.fps;
    out.seq.schema = SchemaId::kGeneric;
    out.events = draw_events(spec, r);
    for (const Event& e : out.events) add_bump(out.seq.frames, e);
    add_baseline(out.seq.frames, spec, r);
    out.seq.validate();
    return out;
}

DyadResult make_dyad(const SynthDyadSpec& spec, std::uint64_t seed) {
    const SynthSpec& sp = spec.speaker;
    if (spec.lag < 0) throw ValidationError("dyad lag must be >= 0");
    if (spec.lag >= sp.T) throw ValidationError("dyad lag must be smaller than T");

    DyadResult out;
    SynthResult speaker = synth_sequence(sp, rng::derive(seed, "dyad-speaker"));
    out.speaker_events = speaker.events;
    out.dyad.speaker = std::move(speaker.seq);

    Mat<real> listener = Mat<real>::zeros(sp.T, sp.d);
    if (spec.rule == DyadRule::kCopyLag) {
        const Mat<real>& s = out.dyad.speaker.frames;
        for (int t = spec.lag; t < sp.T; ++t)
            for (int c = 0; c < sp.d; ++c) listener(t, c) = s(t - spec.lag, c);
        for (const Event& e : out.speaker_events) {
            Event shifted = e;
            shifted.onset += spec.lag;
            shifted.apex += spec.lag;
            shifted.offset += spec.lag;
            if (shifted.apex >= sp.T) continue;
            shifted.offset = std::min(sp.T - 1, shifted.offset);
            out.listener_events.push_back(shifted);
        }
    } else {
        for (const Event& e : out.speaker_events) {
            if (e.cls != spec.trigger_cls) continue;
            Event resp;
            resp.channel = spec.response_channel;
            resp.apex = e.apex + spec.lag;
            resp.onset = resp.apex - spec.response_halfwidth;
            resp.offset = resp.apex + spec.response_halfwidth;
            resp.amplitude = spec.response_amp;
            resp.cls = 0;
            if (resp.apex >= sp.T || resp.onset < 0) continue;
            resp.offset = std::min(sp.T - 1, resp.offset);
            add_bump(listener, resp);
            out.listener_events.push_back(resp);
        }
    }
    out.dyad.listener.frames = std::move(listener);
    out.dyad.listener.fps = sp.fps;
    out.dyad.listener.schema = SchemaId::kGeneric;

    // Mel energy tracks each event class in its own 8-band strip, constant
    // over the 4 audio sub-frames of each video frame.
    AudioFeatures audio;
    audio.kind = AudioFeatures::Kind::kMel;
    audio.mel = Mat<real>::zeros(4 * sp.T, 128);
    if (spec.with_audio) {
        Mat<real> env = Mat<real>::zeros(sp.T, std::max(1, sp.amp_levels));
        for (const Event& e : out.speaker_events) {
            Event on_env = e;
            on_env.channel = std::min(e.cls, env.cols - 1);
            add_bump(env, on_env);
        }
        for (int t = 0; t < sp.T; ++t)
            for (int cls = 0; cls < env.cols; ++cls)
                for (int i = 0; i < 4; ++i)
                    for (int b = 0; b < 8; ++b)
                        audio.mel(4 * t + i, (cls * 8 + b) % 128) = env(t, cls);
    }
    out.dyad.audio = std::move(audio);
    out.dyad.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Container IO
// ---------------------------------------------------------------------------

void write_container(const MotionSequence& seq, const std::string& path) {
    seq.validate();
    std::string out;
    out.append(kMagic, 4);
    binio::put_u32(out, kVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(seq.T()));
    binio::put_u32(out, static_cast<std::uint32_t>(seq.d()));
    binio::put_f32(out, seq.fps);
    binio::put_u32(out, static_cast<std::uint32_t>(seq.schema));
    for (float v : seq.frames.a) binio::put_f32(out, v);
    binio::write_file(path, out);
}

MotionSequence read_container(const std::string& path) {
    binio::Reader r(binio::read_file(path), path);
    if (r.bytes(4, "magic") != std::string(kMagic, 4))
        throw ParseError(path + ": bad magic (expected SFMC)", 0);
    std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw ParseError(path + ": unsupported version " + std::to_string(version), 4);
    std::uint32_t T = r.u32("frame count");
    std::uint32_t d = r.u32("channel count");
    if (T == 0 || d == 0 || T > 100'000'000u || d > 1'000'000u)
        throw ParseError(path + ": implausible dimensions " + std::to_string(T) + "x" +
                             std::to_string(d),
                         8);
    float fps = r.f32("fps");
    std::uint32_t schema = r.u32("schema id");
    if (schema > 2) throw ParseError(path + ": unknown schema id " + std::to_string(schema), 20);
    MotionSequence seq;
    seq.frames = Mat<real>(static_cast<int>(T), static_cast<int>(d));
    r.f32_block(seq.frames.a.data(), seq.frames.size(), "frame payload");
    r.expect_end();
    seq.fps = fps;
    seq.schema = static_cast<SchemaId>(schema);
    seq.validate();
    return seq;
}

void write_sidecar(const std::string& path, const MotionSequence& seq,
                   const std::vector<Event>& events) {
    nlohmann::json j;
    j["fps"] = seq.fps;
    j["schema"] = schema_name(seq.schema);
    j["events"] = nlohmann::json::array();
    for (const Event& e : events)
        j["events"].push_back({{"channel", e.channel},
                               {"onset", e.onset},
                               {"apex", e.apex},
                               {"offset", e.offset},
                               {"amplitude", e.amplitude},
                               {"class", e.cls}});
    binio::write_file(path, j.dump(2) + "\n");
}

std::vector<Event> read_sidecar_events(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(binio::read_file(path));
    } catch (const nlohmann::json::parse_error& err) {
        throw ParseError(path + ": " + err.what(), err.byte);
    }
    std::vector<Event> events;
    for (const auto& je : j.at("events")) {
        Event e;
        e.channel = je.at("channel").get<int>();
        e.onset = je.at("onset").get<int>();
        e.apex = je.at("apex").get<int>();
        e.offset = je.at("offset").get<int>();
        e.amplitude = je.at("amplitude").get<real>();
        e.cls = je.value("class", 0);
        events.push_back(e);
    }
    return events;
}

}  // namespace sfms
