#pragma once

// Deterministic synthetic-corpus generator. Every sample is reproducible from
// (seed, index): the generator draws a script from the vocabulary, a speaking
// rate level, and one or two emotion entities; renders duration and emotion
// instructions from editable text templates that verbally encode those
// choices; and synthesizes per-phoneme ground-truth durations, pitch, and
// energy from documented base tables plus the rate multiplier, emotion
// offsets, and seeded Gaussian noise. Instructions are informative by
// construction - the rendered text always contains the surface phrase for the
// sample's rate level and one recognizable keyword per emotion entity - so a
// faithful analyzer and distiller can in principle recover the conditioning
// exactly.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dubalign/common.hpp"
#include "dubalign/iec.hpp"
#include "dubalign/training.hpp"

namespace dubalign::synth {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RateLevel {
    std::string label;
    double multiplier{1.0};
};

struct EmotionProfile {
    double pitch_offset{0.0};
    double energy_offset{0.0};
};

// Instruction wording, editable as a JSON file. Duration templates contain
// the placeholder "{rate}"; emotion templates contain "{entities}". Each rate
// surface phrase embeds its level label verbatim, which is what makes the
// informativeness guarantee checkable by substring.
struct SynthTemplates {
    std::vector<std::string> duration_templates;
    std::vector<std::string> emotion_templates;
    // rate label -> phrasings, each containing the label itself
    std::map<std::string, std::vector<std::string>> rate_surfaces;
    // emotion label -> paraphrase keywords deliberately absent from the
    // rule analyzer's keyword map (used for the paraphrase-shifted split)
    std::map<std::string, std::vector<std::string>> shifted_keywords;

    static const SynthTemplates& builtin();
    static SynthTemplates load(const std::string& path);
};

// The built-in templates in their on-disk JSON format.
std::string builtin_templates_text();

struct SynthConfig {
    long n_samples{200};
    std::uint64_t seed{7};
    // Script words; empty means every word of the built-in lexicon.
    std::vector<std::string> vocabulary;
    std::vector<RateLevel> rate_levels{{"very slow", 1.6},
                                       {"slow", 1.3},
                                       {"moderate", 1.0},
                                       {"fast", 0.8},
                                       {"very fast", 0.6}};
    std::map<iec::Emotion, EmotionProfile> emotion_profiles{
        {iec::Emotion::happy, {0.8, 0.5}},    {iec::Emotion::angry, {0.5, 0.9}},
        {iec::Emotion::disgust, {-0.4, -0.2}}, {iec::Emotion::fear, {0.6, -0.3}},
        {iec::Emotion::neutral, {0.0, 0.0}},  {iec::Emotion::sad, {-0.8, -0.5}},
        {iec::Emotion::surprise, {1.0, 0.7}}};
    double noise_sigma{0.05};
    int min_words{4};
    int max_words{8};
    int speakers{8};
    // When set, emotion keywords are drawn only from the shifted paraphrase
    // pools (words the rule analyzer does not know); by default keywords come
    // from the union of the rule-analyzer keyword map and the shifted pools.
    bool paraphrase_shift{false};
    num::Index embedding_dim{16};
    SynthTemplates templates = SynthTemplates::builtin();

    void validate() const;
};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

// Per-phoneme base values before rate/emotion/noise are applied. Vowels run
// 8-11 frames, consonants 3.5-6.5, the word boundary a fixed 2; pitch and
// energy sit in [-0.3, 0.3]. All values are deterministic functions of the
// symbol text (documented generator constants, nothing learned).
struct PhonemeProfile {
    double duration{0.0};
    double pitch{0.0};
    double energy{0.0};
};
PhonemeProfile base_profile(const std::string& symbol);

// A generated sample plus the generator's own choices, so tests can assert
// the informativeness guarantee without re-deriving the draws.
struct TracedSample {
    train::Sample sample;
    std::string rate_label;
    std::string rate_surface;
    std::vector<std::string> entity_surfaces;  // aligned with sample.gt_entities
};

std::vector<TracedSample> gen_corpus_traced(const SynthConfig& cfg);
std::vector<train::Sample> gen_corpus(const SynthConfig& cfg);

// Guards a train/held-out split: throws if any script appears in both.
void assert_disjoint_scripts(const std::vector<train::Sample>& a,
                             const std::vector<train::Sample>& b);

}  // namespace dubalign::synth
