#pragma once

// Metric suite and run reports: duration divergence between predicted and
// ground-truth phoneme duration distributions, word error rate over provided
// transcripts, and emotion-embedding cosine similarity, aggregated into a
// per-sample + mean report that serializes as line-delimited JSON alongside
// an aligned plain-text table.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dubalign/common.hpp"
#include "dubalign/iec.hpp"
#include "dubalign/numerics.hpp"
#include "dubalign/training.hpp"

namespace dubalign::eval {

using num::Vec;

// ---------------------------------------------------------------------------
// Metric functions
// ---------------------------------------------------------------------------

// Divergence used between normalized duration distributions. Jensen-Shannon
// (natural log, bounded by ln 2) is the default; symmetric KL is available
// for ablations and is unbounded.
enum class Divergence { jsd, sym_kl };

std::string to_string(Divergence d);
Divergence divergence_from(const std::string& name);

// Normalizes both vectors to probability distributions over phonemes and
// returns the configured divergence. Inputs must be equal-length and strictly
// positive.
double duration_divergence(const Vec& pred_frames, const Vec& gt_frames,
                           Divergence mode = Divergence::jsd);

// Transcript normalization applied before WER: lowercase, drop punctuation
// characters outright (so "don't" becomes "dont"), split on whitespace.
// Characters kept are ASCII letters and digits.
std::vector<std::string> normalize_words(std::string_view text);

// (substitutions + insertions + deletions) / |ref| via the minimal edit
// distance dynamic program. The reference must be non-empty; an empty
// hypothesis costs one deletion per reference word.
double wer(const std::vector<std::string>& ref_words, const std::vector<std::string>& hyp_words);

// 100 * cosine similarity, clamped to [-100, 100] so rounding can never push
// a result out of range. Both vectors must have nonzero norm.
double emo_sim(const Vec& a, const Vec& b);

// ---------------------------------------------------------------------------
// Prediction records
// ---------------------------------------------------------------------------

// One model output per sample, as written by `predict` and consumed by
// `eval`. `transcript` is optional: when empty, the sample is excluded from
// WER with a count recorded in the report.
struct PredictionRecord {
    std::string sample_id;
    Vec durations;  // frames per phoneme, already video-scaled
    Vec pitch;
    Vec energy;
    std::vector<iec::Emotion> entities;
    std::string transcript;

    void validate() const;
};

std::string prediction_to_json(const PredictionRecord& p);
PredictionRecord prediction_from_json(const std::string& line);

void write_predictions(const std::string& path, const std::vector<PredictionRecord>& preds);
std::vector<PredictionRecord> read_predictions(const std::string& path);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct SampleMetrics {
    std::string sample_id;
    double dd{0.0};
    std::optional<double> wer;          // absent without a transcript
    std::optional<double> emo_sim_pct;  // absent without an emotion embedding
};

struct MetricsReport {
    Divergence divergence{Divergence::jsd};
    double dd{0.0};
    std::optional<double> wer;
    std::optional<double> emo_sim_pct;
    std::vector<SampleMetrics> per_sample;
    std::vector<std::string> missing_predictions;  // sample_ids without a record
    int wer_skipped{0};       // predictions lacking transcripts
    int emo_sim_skipped{0};   // samples lacking embeddings or predicted entities
    std::vector<std::string> notes;  // reasons for absent aggregates
};

struct ReportOptions {
    Divergence divergence{Divergence::jsd};
};

// Scores every sample that has a prediction; aggregates are plain means over
// the per-sample entries that carry the metric. Samples without predictions
// are listed, not fatal. A prediction whose duration count disagrees with the
// sample's phoneme count is an input error.
MetricsReport build_report(const std::vector<train::Sample>& samples,
                           const std::vector<PredictionRecord>& predictions,
                           const ReportOptions& options = {});

// Line-delimited JSON: one aggregate record first, then one record per
// sample. `read_report` inverts `write_report` losslessly.
void write_report(const MetricsReport& report, const std::string& path);
MetricsReport read_report(const std::string& path);

// Fixed-width table with one row per sample and a trailing mean row; absent
// metrics render as "n/a".
std::string report_table(const MetricsReport& report);

}  // namespace dubalign::eval
