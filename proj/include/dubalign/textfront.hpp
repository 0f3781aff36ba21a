#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dubalign/common.hpp"
#include "dubalign/numerics.hpp"

namespace dubalign::text {

using num::Index;
using num::Mat;
using num::ParamStore;
using num::Vec;

enum class InstructionKind { duration, emotion };
enum class InstructionSource { fixture, remote, synthetic };

std::string to_string(InstructionKind kind);
std::string to_string(InstructionSource source);
InstructionKind instruction_kind_from(const std::string& s);
InstructionSource instruction_source_from(const std::string& s);

// A natural-language control instruction tied to one sample. `kind` selects
// which model path consumes it (speaking rate vs emotion).
struct InstructionRecord {
    std::string sample_id;
    InstructionKind kind{InstructionKind::duration};
    std::string text;
    InstructionSource source{InstructionSource::fixture};
};

struct PhonemeSequence {
    std::vector<std::string> phonemes;
    Index size() const { return static_cast<Index>(phonemes.size()); }
};

// Model width defaults; all are run-config values.
struct ModelDims {
    Index d_gte{64};    // instruction/entity embedding width
    Index d_m{32};      // phoneme feature width
    Index rnn_hidden{32};  // per-direction recurrent state width
};

// Seed folded into every token hash so embedding streams are independent of
// other RNG consumers. Changing it changes every frozen embedding.
inline constexpr std::uint64_t HASH_SEED = 0x9e3779b97f4a7c15ull;
// Positional encodings are deliberately small relative to the unit-norm
// token vectors so position modulates rather than masks token identity.
inline constexpr double PE_AMPLITUDE = 0.1;

// Deterministic unit-norm embedding of a token string.
Vec token_embedding(std::string_view token, Index d);
// Sinusoidal positional encoding row, scaled by PE_AMPLITUDE.
Vec positional_encoding(Index pos, Index d);

// Frozen instruction embedding: hashed token vectors plus positional
// encoding, one row per token.
Mat embed_instruction(const InstructionRecord& rec, Index d_gte);

// ---------------------------------------------------------------------------
// Grapheme-to-phoneme conversion.
// ---------------------------------------------------------------------------

// Pronunciation table: lowercase word -> phoneme symbols. The built-in table
// covers the synthetic-corpus vocabulary; a file in the same format
// (word<TAB>PH1 PH2 ...) can extend or replace it.
struct Lexicon {
    std::map<std::string, std::vector<std::string>> entries;

    static const Lexicon& builtin();
    static Lexicon load(const std::string& path);
};

// Phoneme inventory (ARPABET symbols without stress, plus the word-boundary
// marker). Order is fixed: it indexes the trainable phoneme table.
const std::vector<std::string>& phoneme_inventory();
const std::string& word_boundary();
// Index into the inventory; unknown symbol -> invalid-input error.
Index phoneme_index(const std::string& symbol);
// Per-letter fallback sounds for words missing from the lexicon.
const std::map<char, std::vector<std::string>>& letter_sounds();

// Raw text of the built-in tables, in the on-disk file formats.
std::string_view builtin_lexicon_text();
std::string_view builtin_inventory_text();

PhonemeSequence g2p(const std::string& script);
PhonemeSequence g2p(const std::string& script, const Lexicon& lex);

// ---------------------------------------------------------------------------
// Trainable phoneme features.
// ---------------------------------------------------------------------------

inline const std::string PHONEME_TABLE = "pho.table";

void register_phoneme_table(ParamStore& store, Index d_m, Rng& rng);
// Row i = table row of phoneme i plus positional encoding of i.
Mat embed_phonemes(const ParamStore& store, const PhonemeSequence& seq);
// Scatter-adds dy rows into the table gradient.
void embed_phonemes_backward(ParamStore& store, const PhonemeSequence& seq, const Mat& dy);

}  // namespace dubalign::text
