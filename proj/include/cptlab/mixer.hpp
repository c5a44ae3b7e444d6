// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stream corpus mixing: document streams, sequence packing, per-block
// role assignment under none / full / curriculum schedules, and a seeded
// synthetic corpus generator.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cptlab/language_model.hpp"

namespace cptlab {

enum class StreamRole : std::uint8_t { target, auxiliary };

[[nodiscard]] std::string_view role_name(StreamRole role) noexcept;

// Newline-delimited UTF-8 documents; empty lines are skipped. Throws IoError,
// CorpusError (0x00 byte, invalid UTF-8).
[[nodiscard]] std::vector<std::string> read_documents(const std::filesystem::path& path);
void write_documents(const std::vector<std::string>& docs, const std::filesystem::path& path);

// Byte-token stream over a document collection. Each epoch visits every
// document once in an order keyed on (seed, epoch); every document is followed
// by kDocumentSeparator.
class CorpusStream {
public:
    using EpochHook = std::function<void(StreamRole, std::uint64_t)>;

    // Throws CorpusError for an empty collection or a document holding 0x00.
    CorpusStream(std::vector<std::string> documents, std::uint64_t seed, StreamRole role, bool cycle = true);

    [[nodiscard]] StreamRole role() const noexcept { return role_; }
    [[nodiscard]] std::uint64_t epoch() const noexcept { return epoch_; }
    [[nodiscard]] std::size_t document_count() const noexcept { return docs_.size(); }
    // Tokens per epoch, separators included.
    [[nodiscard]] std::size_t tokens_per_epoch() const noexcept { return tokens_per_epoch_; }
    [[nodiscard]] const std::vector<std::string>& documents() const noexcept { return docs_; }

    // Called with the new epoch number whenever the stream wraps around.
    void on_epoch(EpochHook hook) { hook_ = std::move(hook); }

    // nullopt once a non-cycling stream is exhausted.
    [[nodiscard]] std::optional<Token> next();
    void reset();

private:
    void start_epoch();

    std::vector<std::string> docs_;
    std::uint64_t seed_;
    StreamRole role_;
    bool cycle_;
    std::size_t tokens_per_epoch_ = 0;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> order_;
    std::size_t doc_pos_ = 0;
    std::size_t byte_pos_ = 0;
    bool exhausted_ = false;
    EpochHook hook_;
};

// Cuts a stream into exact seq_len blocks; the tail of one block's last
// document continues in the next block.
class SequencePacker {
public:
    SequencePacker(CorpusStream& stream, std::size_t seq_len);

    [[nodiscard]] std::size_t seq_len() const noexcept { return seq_len_; }
    [[nodiscard]] CorpusStream& stream() noexcept { return *stream_; }
    // nullopt when the stream cannot fill another whole block.
    [[nodiscard]] std::optional<TokenBlock> next_block();

private:
    CorpusStream* stream_;
    std::size_t seq_len_;
};

// Every whole block of one pass over a non-cycling stream.
[[nodiscard]] std::vector<TokenBlock> pack_sequences(CorpusStream& stream, std::size_t seq_len);

enum class MixMode : std::uint8_t { none, full, curriculum };

[[nodiscard]] std::string_view mix_mode_name(MixMode mode) noexcept;
[[nodiscard]] MixMode parse_mix_mode(std::string_view name);

struct MixSchedule {
    MixMode mode = MixMode::full;
    double aux_fraction = 0.20;
    double cutoff_fraction = 0.10;
    std::int64_t total_steps = 2000;

    [[nodiscard]] std::int64_t cutoff_step() const;
    void validate() const;
};

[[nodiscard]] double mix_fraction_at(std::int64_t step, const MixSchedule& sched);

struct PackedBatch {
    std::vector<TokenBlock> blocks;
    // One tag per token, parallel to blocks.
    std::vector<std::vector<StreamRole>> provenance;

    [[nodiscard]] StreamRole block_role(std::size_t i) const { return provenance.at(i).front(); }
    [[nodiscard]] std::size_t aux_tokens() const;
    [[nodiscard]] std::size_t total_tokens() const;
};

// Role of block `index` at `step`: auxiliary iff u(seed, step, index) < fraction.
[[nodiscard]] StreamRole block_role_at(std::uint64_t seed, std::int64_t step, std::size_t index, double fraction);

// Throws CorpusError when the chosen stream cannot produce a block,
// DomainError for a step outside the schedule.
[[nodiscard]] PackedBatch next_batch(SequencePacker& target, SequencePacker& aux, const MixSchedule& sched,
                                     std::int64_t step, std::size_t batch_size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

enum class Script : std::uint8_t { latin, greek };

[[nodiscard]] std::string_view script_name(Script script) noexcept;
[[nodiscard]] Script parse_script(std::string_view name);

// Documents are random walks over a word-successor table. The grammar id
// fixes the lexicon and the table, the seed fixes the walks.
struct SyntheticCorpusConfig {
    std::uint64_t seed = 0;
    std::uint64_t grammar_id = 0;
    std::size_t n_documents = 1000;
    std::size_t min_words = 8;
    std::size_t max_words = 40;
    Script script = Script::latin;
    std::size_t lexicon_size = 64;

    void validate() const;
};

[[nodiscard]] std::vector<std::string> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg);

// The lexicon of a grammar in the given script, in table order.
[[nodiscard]] std::vector<std::string> grammar_lexicon(std::uint64_t grammar_id, std::size_t lexicon_size,
                                                       Script script);
// Successor word indices of word i.
[[nodiscard]] std::vector<std::size_t> grammar_successors(std::uint64_t grammar_id, std::size_t lexicon_size,
                                                          std::size_t word);

} // namespace cptlab
