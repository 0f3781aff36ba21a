#include "dubalign/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace dubalign::eval {

using nlohmann::json;

namespace {

json vec_to_json(const Vec& v) {
    json arr = json::array();
    for (num::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

Vec vec_from_json(const json& arr) {
    Vec v(arr.size());
    num::Index i = 0;
    for (const auto& x : arr) v(i++) = x.get<double>();
    return v;
}

double kl(const Vec& p, const Vec& q) {
    return (p.array() * (p.array() / q.array()).log()).sum();
}

double mean_of(const std::vector<SampleMetrics>& rows,
               std::optional<double> SampleMetrics::*field) {
    double sum = 0.0;
    int count = 0;
    for (const auto& row : rows) {
        if ((row.*field).has_value()) {
            sum += *(row.*field);
            ++count;
        }
    }
    return sum / double(count);
}

json optional_to_json(const std::optional<double>& v) {
    return v.has_value() ? json(*v) : json(nullptr);
}

std::optional<double> optional_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

void append_cell(std::string& line, const std::optional<double>& v, int width) {
    char buf[32];
    if (v.has_value()) {
        std::snprintf(buf, sizeof(buf), "%*.4f", width, *v);
    } else {
        std::snprintf(buf, sizeof(buf), "%*s", width, "n/a");
    }
    line += buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metric functions
// ---------------------------------------------------------------------------

std::string to_string(Divergence d) {
    return d == Divergence::jsd ? "jsd" : "sym_kl";
}

Divergence divergence_from(const std::string& name) {
    if (name == "jsd") return Divergence::jsd;
    if (name == "sym_kl") return Divergence::sym_kl;
    throw ConfigError("unknown duration divergence '" + name + "' (expected jsd or sym_kl)");
}

double duration_divergence(const Vec& pred_frames, const Vec& gt_frames, Divergence mode) {
    if (pred_frames.size() == 0) {
        throw InvalidInput("duration divergence needs at least one phoneme");
    }
    if (pred_frames.size() != gt_frames.size()) {
        throw InvalidInput("duration divergence length mismatch: " +
                           std::to_string(pred_frames.size()) + " vs " +
                           std::to_string(gt_frames.size()));
    }
    if ((pred_frames.array() <= 0.0).any() || (gt_frames.array() <= 0.0).any()) {
        throw InvalidInput("duration divergence requires strictly positive durations");
    }
    const Vec p = pred_frames / pred_frames.sum();
    const Vec q = gt_frames / gt_frames.sum();
    if (mode == Divergence::sym_kl) {
        return 0.5 * kl(p, q) + 0.5 * kl(q, p);
    }
    const Vec m = 0.5 * (p + q);
    return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

std::vector<std::string> normalize_words(std::string_view text) {
    std::vector<std::string> words;
    std::string word;
    for (const char c : text) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc)) {
            word += char(std::tolower(uc));
        } else if (std::isspace(uc)) {
            if (!word.empty()) {
                words.push_back(std::move(word));
                word.clear();
            }
        }
        // Punctuation is dropped without breaking the word.
    }
    if (!word.empty()) words.push_back(std::move(word));
    return words;
}

double wer(const std::vector<std::string>& ref_words,
           const std::vector<std::string>& hyp_words) {
    if (ref_words.empty()) throw InvalidInput("WER reference must be non-empty");
    const size_t n = hyp_words.size();
    std::vector<size_t> prev(n + 1), cur(n + 1);
    for (size_t j = 0; j <= n; ++j) prev[j] = j;
    for (size_t i = 1; i <= ref_words.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= n; ++j) {
            const size_t sub = prev[j - 1] + (ref_words[i - 1] == hyp_words[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return double(prev[n]) / double(ref_words.size());
}

double emo_sim(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) {
        throw ShapeError("emotion similarity length mismatch: " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
    }
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        throw InvalidInput("emotion similarity is undefined for a zero-norm embedding");
    }
    return std::clamp(100.0 * (a.dot(b) / (na * nb)), -100.0, 100.0);
}

// ---------------------------------------------------------------------------
// Prediction records
// ---------------------------------------------------------------------------

void PredictionRecord::validate() const {
    const auto fail = [&](const std::string& what) {
        throw InvalidInput("prediction " + sample_id + ": " + what);
    };
    if (sample_id.empty()) throw InvalidInput("prediction with empty sample_id");
    if (durations.size() == 0) fail("no durations");
    if (pitch.size() != durations.size() || energy.size() != durations.size()) {
        fail("pitch and energy must have one value per duration (" +
             std::to_string(durations.size()) + "), got pitch=" + std::to_string(pitch.size()) +
             " energy=" + std::to_string(energy.size()));
    }
    if (!durations.allFinite() || !pitch.allFinite() || !energy.allFinite()) {
        fail("non-finite values");
    }
    if ((durations.array() <= 0.0).any()) fail("durations must be positive");
}

std::string prediction_to_json(const PredictionRecord& p) {
    json j{{"sample_id", p.sample_id},
           {"durations", vec_to_json(p.durations)},
           {"pitch", vec_to_json(p.pitch)},
           {"energy", vec_to_json(p.energy)},
           {"entities", json::array()}};
    for (const auto e : p.entities) j["entities"].push_back(iec::to_string(e));
    if (!p.transcript.empty()) j["transcript"] = p.transcript;
    return j.dump();
}

PredictionRecord prediction_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed prediction record: ") + e.what());
    }
    PredictionRecord p;
    try {
        p.sample_id = j.at("sample_id").get<std::string>();
        p.durations = vec_from_json(j.at("durations"));
        p.pitch = vec_from_json(j.at("pitch"));
        p.energy = vec_from_json(j.at("energy"));
        for (const auto& label : j.at("entities")) {
            p.entities.push_back(iec::emotion_from(label.get<std::string>()));
        }
        if (j.contains("transcript")) p.transcript = j.at("transcript").get<std::string>();
    } catch (const json::exception& e) {
        throw InvalidInput("prediction record" +
                           (p.sample_id.empty() ? std::string() : " " + p.sample_id) + ": " +
                           e.what());
    }
    p.validate();
    return p;
}

void write_predictions(const std::string& path, const std::vector<PredictionRecord>& preds) {
    std::string out;
    for (const auto& p : preds) {
        out += prediction_to_json(p);
        out += '\n';
    }
    write_file(path, out);
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
    std::istringstream in{read_file(path)};
    std::vector<PredictionRecord> preds;
    std::unordered_set<std::string> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            preds.push_back(prediction_from_json(line));
        } catch (const Error& e) {
            throw InvalidInput(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!seen.insert(preds.back().sample_id).second) {
            throw InvalidInput(path + " line " + std::to_string(line_no) +
                               ": duplicate prediction for sample " + preds.back().sample_id);
        }
    }
    if (preds.empty()) throw InvalidInput(path + ": no prediction records");
    return preds;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

MetricsReport build_report(const std::vector<train::Sample>& samples,
                           const std::vector<PredictionRecord>& predictions,
                           const ReportOptions& options) {
    if (samples.empty()) throw InvalidInput("report needs at least one sample");
    std::unordered_map<std::string, const PredictionRecord*> by_id;
    for (const auto& p : predictions) {
        p.validate();
        if (!by_id.emplace(p.sample_id, &p).second) {
            throw InvalidInput("duplicate prediction for sample " + p.sample_id);
        }
    }

    MetricsReport report;
    report.divergence = options.divergence;
    for (const auto& sample : samples) {
        const auto it = by_id.find(sample.sample_id);
        if (it == by_id.end()) {
            report.missing_predictions.push_back(sample.sample_id);
            continue;
        }
        const PredictionRecord& pred = *it->second;
        if (pred.durations.size() != sample.gt_durations.size()) {
            throw InvalidInput("sample " + sample.sample_id + ": prediction has " +
                               std::to_string(pred.durations.size()) +
                               " durations but the sample has " +
                               std::to_string(sample.gt_durations.size()) + " phonemes");
        }
        SampleMetrics row;
        row.sample_id = sample.sample_id;
        row.dd = duration_divergence(pred.durations, sample.gt_durations, options.divergence);
        if (!pred.transcript.empty()) {
            row.wer = wer(normalize_words(sample.script), normalize_words(pred.transcript));
        } else {
            ++report.wer_skipped;
        }
        if (sample.emotion_embedding.size() > 0 && !pred.entities.empty()) {
            const Vec emb = iec::entity_embedding(pred.entities, sample.emotion_embedding.size());
            row.emo_sim_pct = emo_sim(emb, sample.emotion_embedding);
        } else {
            ++report.emo_sim_skipped;
        }
        report.per_sample.push_back(std::move(row));
    }

    if (report.per_sample.empty()) {
        throw InvalidInput("no sample has a prediction; nothing to score");
    }
    double dd_sum = 0.0;
    for (const auto& row : report.per_sample) dd_sum += row.dd;
    report.dd = dd_sum / double(report.per_sample.size());

    const auto scored = [&](std::optional<double> SampleMetrics::*field) {
        return std::any_of(report.per_sample.begin(), report.per_sample.end(),
                           [&](const SampleMetrics& r) { return (r.*field).has_value(); });
    };
    if (scored(&SampleMetrics::wer)) {
        report.wer = mean_of(report.per_sample, &SampleMetrics::wer);
    } else {
        report.notes.push_back("wer unavailable: no prediction carries a transcript");
    }
    if (scored(&SampleMetrics::emo_sim_pct)) {
        report.emo_sim_pct = mean_of(report.per_sample, &SampleMetrics::emo_sim_pct);
    } else {
        report.notes.push_back("emo_sim unavailable: no sample carries an emotion embedding");
    }
    return report;
}

void write_report(const MetricsReport& report, const std::string& path) {
    json aggregate{{"kind", "aggregate"},
                   {"divergence", to_string(report.divergence)},
                   {"dd", report.dd},
                   {"wer", optional_to_json(report.wer)},
                   {"emo_sim_pct", optional_to_json(report.emo_sim_pct)},
                   {"samples", report.per_sample.size()},
                   {"missing_predictions", report.missing_predictions},
                   {"wer_skipped", report.wer_skipped},
                   {"emo_sim_skipped", report.emo_sim_skipped},
                   {"notes", report.notes}};
    std::string out = aggregate.dump();
    out += '\n';
    for (const auto& row : report.per_sample) {
        out += json{{"kind", "sample"},
                    {"sample_id", row.sample_id},
                    {"dd", row.dd},
                    {"wer", optional_to_json(row.wer)},
                    {"emo_sim_pct", optional_to_json(row.emo_sim_pct)}}
                   .dump();
        out += '\n';
    }
    write_file(path, out);
}

MetricsReport read_report(const std::string& path) {
    std::istringstream in{read_file(path)};
    std::string line;
    int line_no = 0;
    MetricsReport report;
    bool have_aggregate = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            const auto kind = j.at("kind").get<std::string>();
            if (kind == "aggregate") {
                if (have_aggregate) throw InvalidInput("second aggregate record");
                have_aggregate = true;
                report.divergence = divergence_from(j.at("divergence").get<std::string>());
                report.dd = j.at("dd").get<double>();
                report.wer = optional_from_json(j.at("wer"));
                report.emo_sim_pct = optional_from_json(j.at("emo_sim_pct"));
                report.missing_predictions =
                    j.at("missing_predictions").get<std::vector<std::string>>();
                report.wer_skipped = j.at("wer_skipped").get<int>();
                report.emo_sim_skipped = j.at("emo_sim_skipped").get<int>();
                report.notes = j.at("notes").get<std::vector<std::string>>();
            } else if (kind == "sample") {
                if (!have_aggregate) throw InvalidInput("sample record before the aggregate");
                SampleMetrics row;
                row.sample_id = j.at("sample_id").get<std::string>();
                row.dd = j.at("dd").get<double>();
                row.wer = optional_from_json(j.at("wer"));
                row.emo_sim_pct = optional_from_json(j.at("emo_sim_pct"));
                report.per_sample.push_back(std::move(row));
            } else {
                throw InvalidInput("unknown record kind '" + kind + "'");
            }
        } catch (const json::exception& e) {
            throw InvalidInput(path + " line " + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw InvalidInput(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_aggregate) throw InvalidInput(path + ": no aggregate record");
    return report;
}

std::string report_table(const MetricsReport& report) {
    size_t id_width = 6;  // fits the header and the "mean" row
    for (const auto& row : report.per_sample) {
        id_width = std::max(id_width, row.sample_id.size());
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-*s %10s %10s %12s\n", int(id_width), "sample", "dd", "wer",
                  "emo_sim");
    std::string out = buf;
    out += std::string(id_width, '-') + ' ' + std::string(10, '-') + ' ' + std::string(10, '-') +
           ' ' + std::string(12, '-') + '\n';
    const auto emit = [&](const std::string& name, double dd, const std::optional<double>& w,
                          const std::optional<double>& e) {
        std::snprintf(buf, sizeof(buf), "%-*s %10.4f", int(id_width), name.c_str(), dd);
        std::string line = buf;
        append_cell(line, w, 11);
        append_cell(line, e, 13);
        out += line;
        out += '\n';
    };
    for (const auto& row : report.per_sample) {
        emit(row.sample_id, row.dd, row.wer, row.emo_sim_pct);
    }
    emit("mean", report.dd, report.wer, report.emo_sim_pct);
    for (const auto& note : report.notes) {
        out += "note: " + note + '\n';
    }
    if (!report.missing_predictions.empty()) {
        out += "missing predictions:";
        for (const auto& id : report.missing_predictions) out += ' ' + id;
        out += '\n';
    }
    return out;
}

}  // namespace dubalign::eval
