#include "dubalign/textfront.hpp"

#include <cmath>
#include <sstream>
#include <unordered_map>

namespace dubalign::text {

std::string to_string(InstructionKind kind) {
    return kind == InstructionKind::duration ? "duration" : "emotion";
}

std::string to_string(InstructionSource source) {
    switch (source) {
        case InstructionSource::fixture: return "fixture";
        case InstructionSource::remote: return "remote";
        case InstructionSource::synthetic: return "synthetic";
    }
    return "fixture";
}

InstructionKind instruction_kind_from(const std::string& s) {
    if (s == "duration") return InstructionKind::duration;
    if (s == "emotion") return InstructionKind::emotion;
    throw InvalidInput("unknown instruction kind: " + s);
}

InstructionSource instruction_source_from(const std::string& s) {
    if (s == "fixture") return InstructionSource::fixture;
    if (s == "remote") return InstructionSource::remote;
    if (s == "synthetic") return InstructionSource::synthetic;
    throw InvalidInput("unknown instruction source: " + s);
}

Vec token_embedding(std::string_view token, Index d) {
    Rng rng(fnv1a(token) ^ HASH_SEED);
    Vec v(d);
    for (Index i = 0; i < d; ++i) v(i) = rng.gaussian();
    const double n = v.norm();
    if (n < 1e-12) {
        v.setZero();
        v(0) = 1.0;
        return v;
    }
    return v / n;
}

Vec positional_encoding(Index pos, Index d) {
    Vec pe(d);
    for (Index i = 0; i < d; ++i) {
        const double exponent = static_cast<double>(i - (i % 2)) / static_cast<double>(d);
        const double angle = static_cast<double>(pos) * std::pow(10000.0, -exponent);
        pe(i) = PE_AMPLITUDE * (i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
    return pe;
}

Mat embed_instruction(const InstructionRecord& rec, Index d_gte) {
    if (d_gte < 8) throw InvalidInput("instruction embedding width must be at least 8");
    const std::vector<std::string> tokens = tokenize_words(rec.text);
    if (tokens.empty())
        throw InvalidInput("instruction text is empty for sample " + rec.sample_id);
    Mat out(static_cast<Index>(tokens.size()), d_gte);
    for (Index i = 0; i < out.rows(); ++i) {
        out.row(i) = (token_embedding(tokens[static_cast<std::size_t>(i)], d_gte) +
                      positional_encoding(i, d_gte))
                         .transpose();
    }
    return out;
}

namespace {

std::map<std::string, std::vector<std::string>> parse_lexicon_text(std::string_view text,
                                                                   const std::string& origin) {
    std::map<std::string, std::vector<std::string>> entries;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto where = origin + " line " + std::to_string(line_no);
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw InvalidInput("lexicon entry missing tab separator at " + where);
        const std::string word = lowercase(line.substr(0, tab));
        if (word.empty()) throw InvalidInput("lexicon entry with empty word at " + where);
        std::istringstream rest(line.substr(tab + 1));
        std::vector<std::string> phones;
        std::string p;
        while (rest >> p) {
            phoneme_index(p);  // rejects symbols outside the inventory
            phones.push_back(p);
        }
        if (phones.empty()) throw InvalidInput("lexicon entry with no phonemes at " + where);
        if (!entries.emplace(word, std::move(phones)).second)
            throw InvalidInput("duplicate lexicon word '" + word + "' at " + where);
    }
    return entries;
}

}  // namespace

const Lexicon& Lexicon::builtin() {
    static const Lexicon lex{parse_lexicon_text(builtin_lexicon_text(), "built-in lexicon")};
    return lex;
}

Lexicon Lexicon::load(const std::string& path) {
    return Lexicon{parse_lexicon_text(read_file(path), path)};
}

const std::vector<std::string>& phoneme_inventory() {
    static const std::vector<std::string> inv = [] {
        std::vector<std::string> symbols;
        std::istringstream in{std::string(builtin_inventory_text())};
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) symbols.push_back(line);
        return symbols;
    }();
    return inv;
}

const std::string& word_boundary() {
    static const std::string marker = "_";
    return marker;
}

Index phoneme_index(const std::string& symbol) {
    static const std::unordered_map<std::string, Index> index = [] {
        std::unordered_map<std::string, Index> m;
        const auto& inv = phoneme_inventory();
        for (Index i = 0; i < static_cast<Index>(inv.size()); ++i)
            m.emplace(inv[static_cast<std::size_t>(i)], i);
        return m;
    }();
    auto it = index.find(symbol);
    if (it == index.end()) throw InvalidInput("unknown phoneme symbol: " + symbol);
    return it->second;
}

PhonemeSequence g2p(const std::string& script) { return g2p(script, Lexicon::builtin()); }

PhonemeSequence g2p(const std::string& script, const Lexicon& lex) {
    const std::vector<std::string> words = tokenize_words(script);
    std::vector<std::string> phonemes;
    for (const std::string& word : words) {
        std::vector<std::string> pron;
        if (auto it = lex.entries.find(word); it != lex.entries.end()) {
            pron = it->second;
        } else {
            for (char ch : word) {
                auto ls = letter_sounds().find(ch);
                if (ls == letter_sounds().end()) continue;  // e.g. apostrophes
                pron.insert(pron.end(), ls->second.begin(), ls->second.end());
            }
        }
        if (pron.empty()) continue;
        if (!phonemes.empty()) phonemes.push_back(word_boundary());
        phonemes.insert(phonemes.end(), pron.begin(), pron.end());
    }
    if (phonemes.empty())
        throw InvalidInput("script has no pronounceable words: \"" + script + "\"");
    return PhonemeSequence{std::move(phonemes)};
}

void register_phoneme_table(ParamStore& store, Index d_m, Rng& rng) {
    const auto rows = static_cast<Index>(phoneme_inventory().size());
    store.create(PHONEME_TABLE,
                 num::gaussian_init(rows, d_m, 1.0 / std::sqrt(static_cast<double>(d_m)), rng));
}

Mat embed_phonemes(const ParamStore& store, const PhonemeSequence& seq) {
    if (seq.size() < 1) throw InvalidInput("phoneme sequence is empty");
    const Mat& table = store.value(PHONEME_TABLE);
    Mat out(seq.size(), table.cols());
    for (Index i = 0; i < seq.size(); ++i) {
        const Index row = phoneme_index(seq.phonemes[static_cast<std::size_t>(i)]);
        out.row(i) = table.row(row) + positional_encoding(i, table.cols()).transpose();
    }
    return out;
}

void embed_phonemes_backward(ParamStore& store, const PhonemeSequence& seq, const Mat& dy) {
    Mat& dtable = store.grad(PHONEME_TABLE);
    if (dy.rows() != seq.size() || dy.cols() != dtable.cols())
        throw ShapeError("embed_phonemes_backward: gradient shape mismatch");
    for (Index i = 0; i < seq.size(); ++i)
        dtable.row(phoneme_index(seq.phonemes[static_cast<std::size_t>(i)])) += dy.row(i);
}

}  // namespace dubalign::text
