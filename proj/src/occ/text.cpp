#include "occ/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include <json.hpp>

namespace occ::text {

namespace {
const char* kReserved[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}
}  // namespace

std::vector<std::string> split_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&]() {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (size_t i = 0; i < s.size(); ++i) {
        char c = static_cast<char>(std::tolower(static_cast<unsigned char>(s[i])));
        if (word_char(c)) {
            cur += c;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (c == '\'' && i + 1 < s.size() &&
                   std::tolower(static_cast<unsigned char>(s[i + 1])) == 's' &&
                   (i + 2 >= s.size() || !word_char(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i + 2])))))) {
            // possessive/contraction "'s"
            flush();
            out.push_back("'s");
            ++i;
        } else {
            flush();
            out.push_back(std::string(1, c));
        }
    }
    flush();
    return out;
}

std::string normalize(const std::string& s) {
    std::string out;
    for (const auto& tok : split_tokens(s)) {
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

Vocab Vocab::build(const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw DomainError("cannot build vocabulary from an empty corpus");
    std::map<std::string, int64_t> freq;
    for (const auto& line : corpus)
        for (const auto& tok : split_tokens(line)) ++freq[tok];

    std::vector<std::pair<std::string, int64_t>> order(freq.begin(), freq.end());
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    for (const char* r : kReserved) v.id_to_token_.emplace_back(r);
    for (auto& [tok, n] : order) v.id_to_token_.push_back(tok);
    v.index();
    return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> id_to_token) {
    if (id_to_token.size() < 4) throw FormatError("vocabulary must include the four reserved tokens");
    for (int i = 0; i < 4; ++i)
        if (id_to_token[static_cast<size_t>(i)] != kReserved[i])
            throw FormatError("vocabulary reserved slot " + std::to_string(i) + " is '" +
                              id_to_token[static_cast<size_t>(i)] + "'");
    Vocab v;
    v.id_to_token_ = std::move(id_to_token);
    v.index();
    return v;
}

void Vocab::index() {
    sorted_.clear();
    sorted_.reserve(id_to_token_.size());
    for (size_t i = 4; i < id_to_token_.size(); ++i)
        sorted_.emplace_back(id_to_token_[i], static_cast<int>(i));
    std::sort(sorted_.begin(), sorted_.end());
}

int Vocab::id(const std::string& token) const {
    auto it = std::lower_bound(sorted_.begin(), sorted_.end(), token,
                               [](const auto& p, const std::string& t) { return p.first < t; });
    if (it != sorted_.end() && it->first == token) return it->second;
    return kUnk;
}

bool Vocab::contains(const std::string& token) const { return id(token) != kUnk; }

const std::string& Vocab::token(int tid) const {
    if (tid < 0 || tid >= size())
        throw DomainError("token id " + std::to_string(tid) + " outside vocabulary of " +
                          std::to_string(size()));
    return id_to_token_[static_cast<size_t>(tid)];
}

TokenSeq Vocab::tokenize(const std::string& s) const {
    TokenSeq seq;
    for (const auto& tok : split_tokens(s)) seq.push_back(id(tok));
    return seq;
}

std::string Vocab::detokenize(const TokenSeq& t) const {
    std::string out;
    for (int tid : t) {
        if (tid == kEos) break;
        if (tid == kPad || tid == kBos) continue;
        if (!out.empty()) out += ' ';
        out += token(tid);
    }
    return out;
}

std::string Vocab::to_json() const {
    return nlohmann::json(id_to_token_).dump();
}

Vocab Vocab::from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("vocabulary parse error: ") + e.what());
    }
    if (!j.is_array()) throw FormatError("vocabulary JSON must be an array of strings");
    return from_tokens(j.get<std::vector<std::string>>());
}

void validate_token_seq(const TokenSeq& t, int vocab_size) {
    bool seen_eos = false;
    for (int tid : t) {
        if (tid < 0 || tid >= vocab_size)
            throw DomainError("token id " + std::to_string(tid) + " outside vocabulary of " +
                              std::to_string(vocab_size));
        if (seen_eos) throw DomainError("tokens found after <eos>");
        if (tid == kEos) seen_eos = true;
    }
}

}  // namespace occ::text
