#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <string>

#include "lorafuse/config.hpp"

using namespace lorafuse;

namespace {

RunConfig parse_text(const std::string& text) {
    std::istringstream is(text);
    return RunConfig::parse(is);
}

std::string thrown_message(const std::string& text) {
    try {
        parse_text(text);
    } catch (const FormatError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("config parsing applies sectioned keys") {
    RunConfig c = parse_text(
        "# a comment\n"
        "[model]\n"
        "input_dim = 64   # trailing comment\n"
        "rank = 2\n"
        "\n"
        "[fusion]\n"
        "policy = merge\n"
        "merge_content = 0.5\n"
        "[guidance]\n"
        "enabled = off\n"
        "m = 5\n"
        "[sampler]\n"
        "steps = 10\n"
        "seed = 123\n");
    CHECK(c.input_dim == 64);
    CHECK(c.rank == 2);
    CHECK(c.policy == "merge");
    CHECK(c.merge_content == 0.5);
    CHECK_FALSE(c.guidance_enabled);
    CHECK(c.m == 5.0);
    CHECK(c.steps == 10);
    CHECK(c.seed == 123);
    // untouched keys keep their defaults
    CHECK(c.hidden_dim == 256);
    CHECK(c.criterion == "kl");
}

TEST_CASE("config rejects unknown keys and malformed lines") {
    CHECK_THROWS_AS(parse_text("[model]\nnot_a_key = 1\n"), FormatError);
    CHECK(thrown_message("[model]\nnot_a_key = 1\n").find("model.not_a_key") !=
          std::string::npos);
    // key valid in another section is still unknown here
    CHECK_THROWS_AS(parse_text("[model]\nsteps = 10\n"), FormatError);

    CHECK_THROWS_AS(parse_text("[model\ninput_dim = 4\n"), FormatError);
    CHECK_THROWS_AS(parse_text("[model]\ninput_dim 4\n"), FormatError);
    CHECK(thrown_message("[model]\n\ninput_dim 4\n").find("line 3") != std::string::npos);
    CHECK(thrown_message("[model]\ninput_dim = abc\n").find("line 2") != std::string::npos);
    CHECK_THROWS_AS(parse_text("[guidance]\nenabled = maybe\n"), FormatError);
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS(parse_text("[fusion]\npolicy = blend\n"), FormatError);
    CHECK_THROWS_AS(parse_text("[fusion]\ncriterion = l2\n"), FormatError);
    CHECK_THROWS_AS(parse_text("[sampler]\nsteps = 0\n"), FormatError);
    CHECK_THROWS_AS(parse_text("[sampler]\nsteps = 2000\n"), FormatError);
    CHECK_THROWS_AS(parse_text("[guidance]\nm = -1\n"), FormatError);
}

TEST_CASE("resolved text round-trips and hashes stably") {
    RunConfig c = parse_text("[fusion]\npolicy = topk\ntopk = 12\n[guidance]\nm = 2.5\n");
    const std::string text = c.resolved();
    RunConfig back = parse_text(text);
    CHECK(back.resolved() == text);
    CHECK(back.hash() == c.hash());

    RunConfig other = parse_text("[guidance]\nm = 2.6\n");
    CHECK(other.hash() != c.hash());
}

TEST_CASE("config maps to fusion policies and criteria") {
    RunConfig c;
    c.policy = "base";
    CHECK(c.fusion_policy().kind == FusionPolicy::Kind::BaseOnly);
    c.policy = "content";
    CHECK(c.fusion_policy().kind == FusionPolicy::Kind::ContentOnly);
    c.policy = "style";
    CHECK(c.fusion_policy().kind == FusionPolicy::Kind::StyleOnly);

    c.policy = "merge";
    c.merge_content = 0.25;
    c.merge_style = 0.75;
    FusionPolicy merge = c.fusion_policy();
    CHECK(merge.kind == FusionPolicy::Kind::DirectMerge);
    CHECK(merge.lambda_c == 0.25);
    CHECK(merge.lambda_s == 0.75);

    c.policy = "topk";
    c.topk = 9;
    CHECK(c.fusion_policy().kind == FusionPolicy::Kind::MagnitudeTopK);
    CHECK(c.fusion_policy().topk == 9);

    c.policy = "kl";
    c.temperature = 2.0;
    for (auto [name, crit] : {std::pair<const char*, Criterion>{"kl", Criterion::KL},
                              {"js", Criterion::JS},
                              {"cosine", Criterion::Cosine},
                              {"dot", Criterion::DotProduct}}) {
        c.criterion = name;
        CHECK(c.criterion_enum() == crit);
        FusionPolicy p = c.fusion_policy();
        CHECK(p.kind == FusionPolicy::Kind::KlSelect);
        CHECK(p.criterion == crit);
        CHECK(p.temperature == 2.0);
    }
}
