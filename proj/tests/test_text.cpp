#include <doctest.h>

#include "occ/text.hpp"

using namespace occ;
using namespace occ::text;

TEST_CASE("build_vocab orders by frequency then lexicographic") {
    Vocab v = Vocab::build({"a a b"});
    CHECK(v.id("a") == 4);
    CHECK(v.id("b") == 5);

    // tie on frequency: lexicographic
    Vocab u = Vocab::build({"zebra apple"});
    CHECK(u.id("apple") == 4);
    CHECK(u.id("zebra") == 5);
}

TEST_CASE("build_vocab on empty corpus is a domain error") {
    CHECK_THROWS_AS(Vocab::build({}), DomainError);
}

TEST_CASE("instruction text splits into expected tokens") {
    Vocab v = Vocab::build({"What's the object in the hand?"});
    for (const char* tok : {"what", "'s", "the", "object", "in", "hand", "?"})
        CHECK_MESSAGE(v.contains(tok), "missing token ", tok);
    CHECK(normalize("What's the object in the hand?") == "what 's the object in the hand ?");
}

TEST_CASE("identical token multisets give identical vocabularies") {
    Vocab a = Vocab::build({"red sphere", "blue box"});
    Vocab b = Vocab::build({"blue box red", "sphere"});
    CHECK(a.to_json() == b.to_json());
}

TEST_CASE("tokenize maps unknown words to UNK") {
    Vocab v = Vocab::build({"red sphere"});
    TokenSeq t = v.tokenize("red cube");
    CHECK(t.size() == 2);
    CHECK(t[0] == v.id("red"));
    CHECK(t[1] == kUnk);
}

TEST_CASE("empty round trip") {
    Vocab v = Vocab::build({"a"});
    CHECK(v.tokenize("").empty());
    CHECK(v.detokenize({}) == "");
}

TEST_CASE("repetition tokenizes id-wise") {
    Vocab v = Vocab::build({"sphere sphere"});
    TokenSeq t = v.tokenize("sphere sphere");
    CHECK(t == TokenSeq{v.id("sphere"), v.id("sphere")});
}

TEST_CASE("round trip is normalized identity for in-vocab text") {
    std::vector<std::string> corpus = {
        "What's the object in the hand?", "Is the object in the hand round?",
        "a small red sphere",             "a large yellow torus",
        "yes",                            "no",
        "Describe the object in the hand."};
    Vocab v = Vocab::build(corpus);
    for (const auto& s : corpus) {
        CHECK(v.detokenize(v.tokenize(s)) == normalize(s));
        // idempotent on the normalized form
        CHECK(v.detokenize(v.tokenize(normalize(s))) == normalize(s));
    }
}

TEST_CASE("detokenize stops at EOS and skips reserved ids") {
    Vocab v = Vocab::build({"red sphere"});
    TokenSeq t{kBos, v.id("red"), v.id("sphere"), kEos, v.id("red")};
    CHECK(v.detokenize(t) == "red sphere");
}

TEST_CASE("vocab JSON round trip") {
    Vocab v = Vocab::build({"what 's ? sphere"});
    Vocab w = Vocab::from_json(v.to_json());
    CHECK(w.size() == v.size());
    CHECK(w.id("sphere") == v.id("sphere"));
    CHECK_THROWS_AS(Vocab::from_json("[\"a\"]"), FormatError);
    CHECK_THROWS_AS(Vocab::from_json("not json"), FormatError);
}

TEST_CASE("token sequence validation") {
    CHECK_NOTHROW(validate_token_seq({kBos, 4, 5, kEos}, 6));
    CHECK_THROWS_AS(validate_token_seq({4, 9}, 6), DomainError);
    CHECK_THROWS_AS(validate_token_seq({kEos, 4}, 6), DomainError);
}
