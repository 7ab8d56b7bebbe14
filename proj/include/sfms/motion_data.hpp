#pragma once

// Core data types, the SFMC motion container, and the synthetic generators
// that stand in for recorded dyad corpora at desk scale. Synthetic motion is
// a sum of raised-cosine expression events over a small drifting baseline;
// event apexes are returned alongside the frames as free ground truth.

#include <string>
#include <vector>

#include "sfms/common.hpp"
#include "sfms/mat.hpp"

namespace sfms {

enum class SchemaId : std::uint32_t { kGeneric = 0, kDeca56 = 1, kFaceverse58 = 2 };

struct FeatureSchema {
    SchemaId id = SchemaId::kGeneric;
    int expression_dims = 0;
    int pose_dims = 0;

    int dims() const { return expression_dims + pose_dims; }
};

// GENERIC carries all of d as expression channels; the named schemas use the
// fixed expression/pose splits of their source models.
FeatureSchema schema_for(SchemaId id, int d);
const char* schema_name(SchemaId id);
SchemaId schema_from_name(const std::string& name);

struct MotionSequence {
    Mat<real> frames;  // T x d
    real fps = 30.0f;
    SchemaId schema = SchemaId::kGeneric;

    int T() const { return frames.rows; }
    int d() const { return frames.cols; }
    void validate() const;
};

struct AudioFeatures {
    enum class Kind { kMel, kTokens };
    Kind kind = Kind::kMel;
    Mat<real> mel;            // (4T) x 128 when kMel
    std::vector<int> tokens;  // when kTokens

    void validate(int video_frames) const;
};

struct DyadContext {
    MotionSequence listener;
    MotionSequence speaker;
    AudioFeatures audio;

    void validate() const;
};

// One synthetic expression event: half-cosine rise onset->apex, half-cosine
// fall apex->offset, peak value = amplitude.
struct Event {
    int channel = 0;
    int onset = 0;
    int apex = 0;
    int offset = 0;
    real amplitude = 0;
    int cls = 0;  // discrete event class (amplitude level); used by dyad rules
};

struct SynthSpec {
    int T = 48;
    int d = 8;
    int events = 5;
    real amp_lo = 0.5f;
    real amp_hi = 1.0f;
    real baseline_drift = 0.05f;  // max |baseline|; 0 disables the baseline
    int min_halfwidth = 3;
    int max_halfwidth = 8;
    int amp_levels = 0;  // >0 snaps amplitudes to this many evenly spaced levels
    real fps = 30.0f;
};

struct SynthResult {
    MotionSequence seq;
    std::vector<Event> events;
};

SynthResult synth_sequence(const SynthSpec& spec, std::uint64_t seed);

enum class DyadRule { kCopyLag, kEventResponse };

struct SynthDyadSpec {
    SynthSpec speaker;     // speaker track generator settings
    DyadRule rule = DyadRule::kCopyLag;
    int lag = 4;           // response delay in frames
    int trigger_cls = 1;   // EVENT_RESPONSE: speaker class that triggers a response
    int response_channel = 0;
    real response_amp = 1.0f;
    int response_halfwidth = 4;
    bool with_audio = true;
};

struct DyadResult {
    DyadContext dyad;
    std::vector<Event> speaker_events;
    std::vector<Event> listener_events;
};

DyadResult make_dyad(const SynthDyadSpec& spec, std::uint64_t seed);

// SFMC container: magic "SFMC", version 1, then T and d as unsigned 32-bit
// little-endian, fps as 32-bit float, schema id as unsigned 32-bit, then T*d
// 32-bit floats row-major.
void write_container(const MotionSequence& seq, const std::string& path);
MotionSequence read_container(const std::string& path);

// JSON sidecar { "fps": ..., "schema": ..., "events": [...] } next to a container.
void write_sidecar(const std::string& path, const MotionSequence& seq,
                   const std::vector<Event>& events);
std::vector<Event> read_sidecar_events(const std::string& path);

}  // namespace sfms
