#include "dubalign/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <utility>

#include "dubalign/textfront.hpp"
#include "json.hpp"

namespace dubalign::synth {

using nlohmann::json;

namespace {

// On-disk form of the built-in instruction templates. Duration phrasings all
// embed their rate label verbatim; the shifted keyword pools deliberately
// avoid every word in the rule analyzer's keyword table.
constexpr const char* kTemplatesText = R"({
  "duration_templates": [
    "Please read the line {rate}.",
    "Deliver this line {rate}.",
    "I want the narration {rate}.",
    "Keep the pacing {rate} for this one."
  ],
  "emotion_templates": [
    "Sound {entities} when you deliver the line.",
    "Let the read feel {entities} all the way through.",
    "The voice should come across as {entities}.",
    "Give the line a {entities} coloring."
  ],
  "rate_surfaces": {
    "very slow": ["very slow and deliberate", "at a very slow pace"],
    "slow": ["slow and steady", "at a slow pace"],
    "moderate": ["at a moderate pace", "in a moderate tempo"],
    "fast": ["fast and clipped", "at a fast pace"],
    "very fast": ["very fast with urgency", "at a very fast pace"]
  },
  "shifted_keywords": {
    "happy": ["gleeful", "jubilant"],
    "angry": ["seething", "livid"],
    "disgust": ["nauseated", "sickened"],
    "fear": ["petrified", "panicky"],
    "neutral": ["impassive", "unemotional"],
    "sad": ["dejected", "heartbroken"],
    "surprise": ["stunned", "astounded"]
  }
}
)";

SynthTemplates parse_templates(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InvalidInput(origin + ": " + e.what());
    }
    SynthTemplates t;
    try {
        t.duration_templates = j.at("duration_templates").get<std::vector<std::string>>();
        t.emotion_templates = j.at("emotion_templates").get<std::vector<std::string>>();
        t.rate_surfaces =
            j.at("rate_surfaces").get<std::map<std::string, std::vector<std::string>>>();
        t.shifted_keywords =
            j.at("shifted_keywords").get<std::map<std::string, std::vector<std::string>>>();
    } catch (const json::exception& e) {
        throw InvalidInput(origin + ": " + e.what());
    }
    if (t.duration_templates.empty()) throw InvalidInput(origin + ": no duration templates");
    if (t.emotion_templates.empty()) throw InvalidInput(origin + ": no emotion templates");
    for (const auto& tpl : t.duration_templates) {
        if (tpl.find("{rate}") == std::string::npos) {
            throw InvalidInput(origin + ": duration template '" + tpl + "' lacks {rate}");
        }
    }
    for (const auto& tpl : t.emotion_templates) {
        if (tpl.find("{entities}") == std::string::npos) {
            throw InvalidInput(origin + ": emotion template '" + tpl + "' lacks {entities}");
        }
    }
    for (const auto& [label, surfaces] : t.rate_surfaces) {
        if (surfaces.empty()) throw InvalidInput(origin + ": no surfaces for rate '" + label + "'");
        for (const auto& surface : surfaces) {
            if (surface.find(label) == std::string::npos) {
                throw InvalidInput(origin + ": rate surface '" + surface +
                                   "' does not contain its label '" + label + "'");
            }
        }
    }
    return t;
}

std::string replace_all(std::string text, const std::string& placeholder,
                        const std::string& value) {
    size_t pos = 0;
    while ((pos = text.find(placeholder, pos)) != std::string::npos) {
        text.replace(pos, placeholder.size(), value);
        pos += value.size();
    }
    return text;
}

// The rule analyzer's keyword table inverted: entity label -> known keywords,
// in the table's (sorted) order.
const std::map<std::string, std::vector<std::string>>& canonical_keywords() {
    static const std::map<std::string, std::vector<std::string>> pools = [] {
        std::map<std::string, std::vector<std::string>> out;
        for (const auto& [keyword, entity] : iec::KeywordMap::builtin().entries) {
            out[iec::to_string(entity)].push_back(keyword);
        }
        return out;
    }();
    return pools;
}

double clipped_gaussian(Rng& rng) { return std::clamp(rng.gaussian(), -3.0, 3.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

std::string builtin_templates_text() { return kTemplatesText; }

const SynthTemplates& SynthTemplates::builtin() {
    static const SynthTemplates t = parse_templates(kTemplatesText, "built-in synth templates");
    return t;
}

SynthTemplates SynthTemplates::load(const std::string& path) {
    return parse_templates(read_file(path), path);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
    if (n_samples < 1) throw ConfigError("synth.n_samples must be at least 1");
    if (rate_levels.empty()) throw ConfigError("synth.rate_levels is empty");
    std::set<std::string> labels;
    for (const auto& level : rate_levels) {
        if (level.label.empty()) throw ConfigError("synth rate level with empty label");
        if (level.multiplier <= 0.0) {
            throw ConfigError("synth rate '" + level.label + "' multiplier must be positive");
        }
        if (!labels.insert(level.label).second) {
            throw ConfigError("duplicate synth rate label '" + level.label + "'");
        }
        const auto it = templates.rate_surfaces.find(level.label);
        if (it == templates.rate_surfaces.end() || it->second.empty()) {
            throw ConfigError("synth templates carry no surfaces for rate '" + level.label + "'");
        }
    }
    if (emotion_profiles.empty()) throw ConfigError("synth.emotion_profiles is empty");
    for (const auto& [entity, profile] : emotion_profiles) {
        (void)profile;
        const std::string label = iec::to_string(entity);
        const auto it = templates.shifted_keywords.find(label);
        if (it == templates.shifted_keywords.end() || it->second.empty()) {
            throw ConfigError("synth templates carry no shifted keywords for '" + label + "'");
        }
    }
    if (noise_sigma < 0.0 || noise_sigma > 0.25) {
        throw ConfigError("synth.noise_sigma must lie in [0, 0.25]");
    }
    if (min_words < 1) throw ConfigError("synth.min_words must be at least 1");
    if (max_words < min_words) throw ConfigError("synth.max_words must be >= min_words");
    if (speakers < 1) throw ConfigError("synth.speakers must be at least 1");
    if (embedding_dim < 1) throw ConfigError("synth.embedding_dim must be at least 1");
    for (const auto& word : vocabulary) {
        if (word.empty()) throw ConfigError("synth vocabulary contains an empty word");
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

PhonemeProfile base_profile(const std::string& symbol) {
    (void)text::phoneme_index(symbol);  // unknown symbols are input errors
    if (symbol == text::word_boundary()) return {2.0, 0.0, 0.0};
    static const std::set<std::string> vowels{"AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER",
                                              "EY", "IH", "IY", "OW", "OY", "UH", "UW"};
    const bool vowel = vowels.count(symbol) > 0;
    const std::uint64_t h = fnv1a(symbol);
    const double u0 = double(h & 0xFFF) / 4095.0;
    const double u1 = double((h >> 12) & 0xFFF) / 4095.0;
    const double u2 = double((h >> 24) & 0xFFF) / 4095.0;
    PhonemeProfile p;
    p.duration = (vowel ? 8.0 : 3.5) + 3.0 * u0;
    p.pitch = (vowel ? 0.6 : 0.3) * (u1 - 0.5);
    p.energy = (vowel ? 0.6 : 0.3) * (u2 - 0.5);
    return p;
}

std::vector<TracedSample> gen_corpus_traced(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<std::string> vocab = cfg.vocabulary;
    if (vocab.empty()) {
        for (const auto& [word, sounds] : text::Lexicon::builtin().entries) {
            (void)sounds;
            vocab.push_back(word);
        }
    }
    std::vector<iec::Emotion> entity_pool;
    for (const auto& [entity, profile] : cfg.emotion_profiles) {
        (void)profile;
        entity_pool.push_back(entity);
    }

    std::set<std::string> seen_scripts;
    std::vector<TracedSample> out;
    out.reserve(size_t(cfg.n_samples));
    for (long i = 0; i < cfg.n_samples; ++i) {
        Rng rng(cfg.seed ^ (std::uint64_t(i + 1) * 0x9e3779b97f4a7c15ull));
        TracedSample traced;
        train::Sample& s = traced.sample;

        char id[32];
        std::snprintf(id, sizeof(id), "synth-%04ld", i + 1);
        s.sample_id = id;

        // Script: fresh word sequence, never repeating an earlier script.
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 1000) {
                throw InfeasibleError("synth vocabulary cannot supply " +
                                      std::to_string(cfg.n_samples) + " distinct scripts");
            }
            const int n_words =
                cfg.min_words + int(rng.below(std::uint64_t(cfg.max_words - cfg.min_words + 1)));
            std::string script;
            for (int w = 0; w < n_words; ++w) {
                if (w > 0) script += ' ';
                script += vocab[rng.below(vocab.size())];
            }
            if (seen_scripts.insert(script).second) {
                s.script = std::move(script);
                break;
            }
        }
        s.speaker_id = "spk" + std::to_string(rng.below(std::uint64_t(cfg.speakers)));

        // Rate level and its rendered duration instruction.
        const RateLevel& level = cfg.rate_levels[rng.below(cfg.rate_levels.size())];
        const auto& surfaces = cfg.templates.rate_surfaces.at(level.label);
        traced.rate_label = level.label;
        traced.rate_surface = surfaces[rng.below(surfaces.size())];
        const auto& dur_tpl =
            cfg.templates.duration_templates[rng.below(cfg.templates.duration_templates.size())];
        s.dur_instruction = {s.sample_id, text::InstructionKind::duration,
                             replace_all(dur_tpl, "{rate}", traced.rate_surface),
                             text::InstructionSource::synthetic};

        // One or two distinct emotion entities with keyword surfaces. The
        // default pool is the union of rule-analyzer keywords and shifted
        // paraphrases; paraphrase_shift narrows it to the shifted words only.
        const int n_entities = entity_pool.size() < 2 ? 1 : 1 + int(rng.below(2));
        std::vector<size_t> picks{size_t(rng.below(entity_pool.size()))};
        while (int(picks.size()) < n_entities) {
            const size_t pick = size_t(rng.below(entity_pool.size()));
            if (pick != picks[0]) picks.push_back(pick);
        }
        std::string entity_phrase;
        for (const size_t pick : picks) {
            const iec::Emotion entity = entity_pool[pick];
            const std::string label = iec::to_string(entity);
            std::vector<std::string> pool;
            if (!cfg.paraphrase_shift) {
                pool = canonical_keywords().at(label);
            }
            const auto& shifted = cfg.templates.shifted_keywords.at(label);
            pool.insert(pool.end(), shifted.begin(), shifted.end());
            const std::string& surface = pool[rng.below(pool.size())];
            s.gt_entities.push_back(entity);
            traced.entity_surfaces.push_back(surface);
            if (!entity_phrase.empty()) entity_phrase += " and ";
            entity_phrase += surface;
        }
        const auto& emo_tpl =
            cfg.templates.emotion_templates[rng.below(cfg.templates.emotion_templates.size())];
        s.emo_instruction = {s.sample_id, text::InstructionKind::emotion,
                             replace_all(emo_tpl, "{entities}", entity_phrase),
                             text::InstructionSource::synthetic};

        // Ground truth from the base tables, the rate multiplier, and the
        // mean emotion offsets, with seeded noise.
        double pitch_offset = 0.0, energy_offset = 0.0;
        for (const auto entity : s.gt_entities) {
            const EmotionProfile& profile = cfg.emotion_profiles.at(entity);
            pitch_offset += profile.pitch_offset;
            energy_offset += profile.energy_offset;
        }
        pitch_offset /= double(s.gt_entities.size());
        energy_offset /= double(s.gt_entities.size());

        s.phonemes = text::g2p(s.script);
        const num::Index l = num::Index(s.phonemes.size());
        s.gt_durations.resize(l);
        s.gt_pitch.resize(l);
        s.gt_energy.resize(l);
        for (num::Index p = 0; p < l; ++p) {
            const PhonemeProfile base = base_profile(s.phonemes.phonemes[size_t(p)]);
            const double scaled = base.duration * level.multiplier;
            const double noisy = scaled * (1.0 + cfg.noise_sigma * clipped_gaussian(rng));
            s.gt_durations(p) = std::max(noisy, 0.2 * scaled);
            s.gt_pitch(p) = base.pitch + pitch_offset + 0.08 * clipped_gaussian(rng);
            s.gt_energy(p) = base.energy + energy_offset + 0.08 * clipped_gaussian(rng);
        }
        s.video_frames = long(std::llround(s.gt_durations.sum()));
        s.emotion_embedding = iec::entity_embedding(s.gt_entities, cfg.embedding_dim);
        s.validate();
        out.push_back(std::move(traced));
    }
    return out;
}

std::vector<train::Sample> gen_corpus(const SynthConfig& cfg) {
    std::vector<train::Sample> samples;
    auto traced = gen_corpus_traced(cfg);
    samples.reserve(traced.size());
    for (auto& t : traced) samples.push_back(std::move(t.sample));
    return samples;
}

void assert_disjoint_scripts(const std::vector<train::Sample>& a,
                             const std::vector<train::Sample>& b) {
    std::map<std::string, std::string> scripts;
    for (const auto& s : a) scripts.emplace(s.script, s.sample_id);
    for (const auto& s : b) {
        const auto it = scripts.find(s.script);
        if (it != scripts.end()) {
            throw InvalidInput("script '" + s.script + "' appears in both corpora (samples " +
                               it->second + " and " + s.sample_id + ")");
        }
    }
}

}  // namespace dubalign::synth
