// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include "cptlab/mixer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cptlab/errors.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

namespace {

// Stream tags mixed into keyed seeds so the two streams never share a sequence.
constexpr std::uint64_t kStreamSalt = 0x5354524d;
constexpr std::uint64_t kGrammarSalt = 0x4752414d;
constexpr std::uint64_t kWalkSalt = 0x57414c4b;
constexpr std::size_t kAlphabet = 16;

bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t extra = 0;
        if (c < 0x80) {
            extra = 0;
        } else if ((c & 0xE0) == 0xC0 && c >= 0xC2) {
            extra = 1;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
        } else if ((c & 0xF8) == 0xF0 && c <= 0xF4) {
            extra = 3;
        } else {
            return false;
        }
        if (i + extra >= s.size() && extra > 0) {
            return false;
        }
        for (std::size_t k = 1; k <= extra; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) {
                return false;
            }
        }
        i += extra + 1;
    }
    return true;
}

void check_document(std::string_view doc, std::size_t index) {
    if (doc.find('\0') != std::string_view::npos) {
        throw CorpusError("document " + std::to_string(index) + " contains the reserved separator byte 0x00");
    }
}

void append_letter(std::string& out, std::size_t letter, Script script) {
    if (script == Script::latin) {
        out.push_back(static_cast<char>('a' + letter));
        return;
    }
    // U+03B1 (alpha) onwards, two UTF-8 bytes each
    const auto cp = static_cast<unsigned>(0x03B1 + letter);
    out.push_back(static_cast<char>(0xC0 | (cp >> 6U)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3FU)));
}

} // namespace

std::string_view role_name(StreamRole role) noexcept { return role == StreamRole::target ? "target" : "aux"; }

std::vector<std::string> read_documents(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open corpus file " + path.string());
    }
    std::vector<std::string> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (line.find('\0') != std::string::npos) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": reserved separator byte 0x00");
        }
        if (!valid_utf8(line)) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": invalid UTF-8");
        }
        docs.push_back(std::move(line));
    }
    if (in.bad()) {
        throw IoError("read failed for " + path.string());
    }
    return docs;
}

void write_documents(const std::vector<std::string>& docs, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    for (const auto& d : docs) {
        if (d.find('\n') != std::string::npos) {
            throw CorpusError("document contains a newline and cannot be stored one per line");
        }
        out << d << '\n';
    }
    if (!out.flush()) {
        throw IoError("write failed for " + path.string());
    }
}

// ---------------------------------------------------------------------------
// CorpusStream
// ---------------------------------------------------------------------------

CorpusStream::CorpusStream(std::vector<std::string> documents, std::uint64_t seed, StreamRole role, bool cycle)
    : seed_(seed), role_(role), cycle_(cycle) {
    for (std::size_t i = 0; i < documents.size(); ++i) {
        check_document(documents[i], i);
        if (!documents[i].empty()) {
            docs_.push_back(std::move(documents[i]));
        }
    }
    if (docs_.empty()) {
        throw CorpusError(std::string("empty ") + std::string(role_name(role)) + " corpus");
    }
    for (const auto& d : docs_) {
        tokens_per_epoch_ += d.size() + 1;
    }
    start_epoch();
}

void CorpusStream::start_epoch() {
    order_.resize(docs_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(hash_key(seed_, kStreamSalt, static_cast<std::uint64_t>(role_), epoch_));
    rng.shuffle(order_);
    doc_pos_ = 0;
    byte_pos_ = 0;
}

void CorpusStream::reset() {
    epoch_ = 0;
    exhausted_ = false;
    start_epoch();
}

std::optional<Token> CorpusStream::next() {
    if (exhausted_) {
        return std::nullopt;
    }
    if (doc_pos_ == order_.size()) {
        if (!cycle_) {
            exhausted_ = true;
            return std::nullopt;
        }
        ++epoch_;
        start_epoch();
        if (hook_) {
            hook_(role_, epoch_);
        }
    }
    const std::string& doc = docs_[order_[doc_pos_]];
    if (byte_pos_ < doc.size()) {
        return static_cast<Token>(static_cast<unsigned char>(doc[byte_pos_++]));
    }
    ++doc_pos_;
    byte_pos_ = 0;
    return kDocumentSeparator;
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

SequencePacker::SequencePacker(CorpusStream& stream, std::size_t seq_len) : stream_(&stream), seq_len_(seq_len) {
    if (seq_len < 2) {
        throw ConfigError("seq_len must be at least 2");
    }
}

std::optional<TokenBlock> SequencePacker::next_block() {
    TokenBlock block;
    block.reserve(seq_len_);
    while (block.size() < seq_len_) {
        const auto tok = stream_->next();
        if (!tok) {
            return std::nullopt;
        }
        block.push_back(*tok);
    }
    return block;
}

std::vector<TokenBlock> pack_sequences(CorpusStream& stream, std::size_t seq_len) {
    SequencePacker packer(stream, seq_len);
    std::vector<TokenBlock> out;
    const std::size_t limit = stream.tokens_per_epoch() / seq_len;
    while (out.size() < limit) {
        auto block = packer.next_block();
        if (!block) {
            break;
        }
        out.push_back(std::move(*block));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

std::string_view mix_mode_name(MixMode mode) noexcept {
    switch (mode) {
    case MixMode::none:
        return "none";
    case MixMode::full:
        return "full";
    case MixMode::curriculum:
        return "curriculum";
    }
    return "?";
}

MixMode parse_mix_mode(std::string_view name) {
    if (name == "none") {
        return MixMode::none;
    }
    if (name == "full") {
        return MixMode::full;
    }
    if (name == "curriculum") {
        return MixMode::curriculum;
    }
    throw ConfigError("unknown mix mode '" + std::string(name) + "' (expected none, full or curriculum)");
}

std::int64_t MixSchedule::cutoff_step() const {
    return static_cast<std::int64_t>(std::llround(cutoff_fraction * static_cast<double>(total_steps)));
}

void MixSchedule::validate() const {
    if (!(aux_fraction >= 0.0 && aux_fraction < 1.0)) {
        throw ConfigError("aux_fraction must lie in [0, 1)");
    }
    if (!(cutoff_fraction > 0.0 && cutoff_fraction <= 1.0)) {
        throw ConfigError("cutoff_fraction must lie in (0, 1]");
    }
    if (total_steps <= 0) {
        throw ConfigError("schedule total_steps must be positive");
    }
}

double mix_fraction_at(std::int64_t step, const MixSchedule& sched) {
    if (step < 0 || step >= sched.total_steps) {
        throw DomainError("mixer step " + std::to_string(step) + " outside [0, " + std::to_string(sched.total_steps) +
                          ")");
    }
    switch (sched.mode) {
    case MixMode::none:
        return 0.0;
    case MixMode::full:
        return sched.aux_fraction;
    case MixMode::curriculum:
        return step < sched.cutoff_step() ? sched.aux_fraction : 0.0;
    }
    return 0.0;
}

std::size_t PackedBatch::aux_tokens() const {
    std::size_t n = 0;
    for (const auto& tags : provenance) {
        for (StreamRole r : tags) {
            n += r == StreamRole::auxiliary ? 1 : 0;
        }
    }
    return n;
}

std::size_t PackedBatch::total_tokens() const {
    std::size_t n = 0;
    for (const auto& b : blocks) {
        n += b.size();
    }
    return n;
}

StreamRole block_role_at(std::uint64_t seed, std::int64_t step, std::size_t index, double fraction) {
    const double u = to_unit_interval(hash_key(seed, static_cast<std::uint64_t>(step), index));
    return u < fraction ? StreamRole::auxiliary : StreamRole::target;
}

PackedBatch next_batch(SequencePacker& target, SequencePacker& aux, const MixSchedule& sched, std::int64_t step,
                       std::size_t batch_size, std::uint64_t seed) {
    if (target.seq_len() != aux.seq_len()) {
        throw ConfigError("target and aux packers disagree on seq_len");
    }
    const double fraction = mix_fraction_at(step, sched);
    PackedBatch batch;
    batch.blocks.reserve(batch_size);
    batch.provenance.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const StreamRole role = block_role_at(seed, step, i, fraction);
        SequencePacker& src = role == StreamRole::auxiliary ? aux : target;
        auto block = src.next_block();
        if (!block) {
            throw CorpusError(std::string(role_name(role)) + " stream exhausted at step " + std::to_string(step));
        }
        batch.provenance.emplace_back(block->size(), role);
        batch.blocks.push_back(std::move(*block));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

std::string_view script_name(Script script) noexcept { return script == Script::latin ? "latin" : "greek"; }

Script parse_script(std::string_view name) {
    if (name == "latin") {
        return Script::latin;
    }
    if (name == "greek") {
        return Script::greek;
    }
    throw ConfigError("unknown script '" + std::string(name) + "' (expected latin or greek)");
}

void SyntheticCorpusConfig::validate() const {
    if (n_documents == 0) {
        throw ConfigError("n_documents must be positive");
    }
    if (min_words == 0 || max_words < min_words) {
        throw ConfigError("need 1 <= min_words <= max_words");
    }
    if (lexicon_size < 2 || lexicon_size > 4096) {
        throw ConfigError("lexicon_size must lie in [2, 4096]");
    }
}

std::vector<std::string> grammar_lexicon(std::uint64_t grammar_id, std::size_t lexicon_size, Script script) {
    Rng rng(hash_key(grammar_id, kGrammarSalt));
    std::set<std::vector<std::size_t>> seen;
    std::vector<std::string> words;
    while (words.size() < lexicon_size) {
        std::vector<std::size_t> letters(static_cast<std::size_t>(rng.between(2, 7)));
        for (auto& l : letters) {
            l = rng.below(kAlphabet);
        }
        if (!seen.insert(letters).second) {
            continue;
        }
        std::string w;
        for (std::size_t l : letters) {
            append_letter(w, l, script);
        }
        words.push_back(std::move(w));
    }
    return words;
}

std::vector<std::size_t> grammar_successors(std::uint64_t grammar_id, std::size_t lexicon_size, std::size_t word) {
    Rng rng(hash_key(grammar_id, kGrammarSalt, word + 1));
    const auto n = static_cast<std::size_t>(rng.between(2, 4));
    std::vector<std::size_t> out;
    while (out.size() < n) {
        out.push_back(rng.below(lexicon_size));
    }
    return out;
}

std::vector<std::string> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
    cfg.validate();
    const auto lexicon = grammar_lexicon(cfg.grammar_id, cfg.lexicon_size, cfg.script);
    std::vector<std::vector<std::size_t>> successors(cfg.lexicon_size);
    for (std::size_t w = 0; w < cfg.lexicon_size; ++w) {
        successors[w] = grammar_successors(cfg.grammar_id, cfg.lexicon_size, w);
    }
    Rng rng(hash_key(cfg.seed, kWalkSalt, cfg.grammar_id));
    std::vector<std::string> docs;
    docs.reserve(cfg.n_documents);
    for (std::size_t d = 0; d < cfg.n_documents; ++d) {
        const auto n_words = static_cast<std::size_t>(
            rng.between(static_cast<std::int64_t>(cfg.min_words), static_cast<std::int64_t>(cfg.max_words)));
        std::string doc;
        std::size_t word = rng.below(cfg.lexicon_size);
        for (std::size_t i = 0; i < n_words; ++i) {
            if (i > 0) {
                // sentence break roughly every seven words
                doc += rng.below(7) == 0 ? ". " : " ";
            }
            doc += lexicon[word];
            const auto& next = successors[word];
            word = next[rng.below(next.size())];
        }
        doc += '.';
        docs.push_back(std::move(doc));
    }
    return docs;
}

} // namespace cptlab
