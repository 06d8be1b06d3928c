#pragma once

#include <string>
#include <vector>

#include "occ/error.hpp"

namespace occ::text {

// Reserved token ids. Corpus tokens start at 4.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

using TokenSeq = std::vector<int>;

// Lowercases and splits into word/punctuation tokens. "'s" survives as one token,
// standalone punctuation characters become their own tokens.
std::vector<std::string> split_tokens(const std::string& s);

// Space-joined token stream; the canonical form tokenize/detokenize round-trips to.
std::string normalize(const std::string& s);

class Vocab {
public:
    // Word-level vocabulary over the corpus, ids assigned by (frequency desc,
    // lexicographic) after the four reserved ids.
    static Vocab build(const std::vector<std::string>& corpus);

    static Vocab from_tokens(std::vector<std::string> id_to_token);  // deserialization

    int size() const { return static_cast<int>(id_to_token_.size()); }
    int id(const std::string& token) const;       // kUnk when absent
    bool contains(const std::string& token) const;
    const std::string& token(int id) const;

    TokenSeq tokenize(const std::string& s) const;
    // Inverse of tokenize on in-vocab text; PAD/BOS/EOS are skipped, UNK renders
    // as its marker. Stops at the first EOS.
    std::string detokenize(const TokenSeq& t) const;

    // JSON array of token strings in id order.
    std::string to_json() const;
    static Vocab from_json(const std::string& json_text);

private:
    std::vector<std::string> id_to_token_;
    std::vector<std::pair<std::string, int>> sorted_;  // token -> id, sorted by token

    void index();
};

void validate_token_seq(const TokenSeq& t, int vocab_size);

}  // namespace occ::text
