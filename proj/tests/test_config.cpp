#include <gtest/gtest.h>

#include "cloak/config.hpp"
#include "cloak/errors.hpp"

namespace cloak {
namespace {

std::string config_error(const std::string& text) {
    try {
        parse_config(text).validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

TEST(Config, EmptyObjectGivesValidDefaults) {
    const ExperimentConfig c = parse_config("{}");
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.corpus.image_size, 32);
    EXPECT_EQ(c.attack.B, 25);
    EXPECT_EQ(c.attack.t_out, 50);
    EXPECT_EQ(c.attack.t_in, 6);
    EXPECT_EQ(c.attack.apv_rounds, 500);
    EXPECT_EQ(c.dreambooth.steps, 1000);
    EXPECT_EQ(c.eval.tau, 0.5);
    EXPECT_EQ(c.hash().size(), 64u);
    EXPECT_EQ(c.hash(), parse_config("{}").hash());
}

TEST(Config, HashIgnoresOutputDirButSeesEverythingElse) {
    const std::string h = parse_config("{}").hash();
    EXPECT_EQ(parse_config(R"({"output_dir": "/tmp/elsewhere"})").hash(), h);
    EXPECT_NE(parse_config(R"({"seed": 1})").hash(), h);
    EXPECT_NE(parse_config(R"({"attack": {"alpha2": 0.5}})").hash(), h);
    // Spelling out a default does not change the hash.
    EXPECT_EQ(parse_config(R"({"attack": {"B": 25}})").hash(), h);
}

TEST(Config, JsonRoundTrip) {
    const ExperimentConfig c = parse_config(R"({"seed": 4, "output_dir": "x", "corpus": {"image_size": 16},
        "eval": {"heatmap_resolution": 8, "prompts": ["a photo of sks person"]}})");
    const ExperimentConfig back = parse_config(config_to_json(c));
    EXPECT_EQ(back.hash(), c.hash());
    EXPECT_EQ(back.output_dir, "x");
    EXPECT_EQ(back.eval.prompts.size(), 1u);
}

TEST(Config, RejectsInvalidValues) {
    EXPECT_NE(config_error(R"({"attack": {"B": 30}})").find("B"), std::string::npos);
    EXPECT_NE(config_error(R"({"attack": {"alpha1": 1.2}})").find("alpha1"), std::string::npos);
    EXPECT_NE(config_error(R"({"attack": {"omega": 0}})").find("omega"), std::string::npos);
    EXPECT_NE(config_error(R"({"attack": {"T": 500}})").find("attack.T"), std::string::npos);
    EXPECT_NE(config_error(R"({"eval": {"heatmap_resolution": 12}})").find("heatmap_resolution"), std::string::npos);
    EXPECT_NE(config_error(R"({"corpus": {"image_size": 15}})"), "");
    EXPECT_NE(config_error(R"({"dreambooth": {"instance_prompt": "a photo of person"}})").find("keyword"),
              std::string::npos);
}

TEST(Config, ReportsEveryProblemAtOnce) {
    const std::string msg = config_error(R"({"attack": {"B": 30, "alpha1": 2.0}, "eval": {"tau": 0}})");
    EXPECT_NE(msg.find("B"), std::string::npos);
    EXPECT_NE(msg.find("alpha1"), std::string::npos);
    EXPECT_NE(msg.find("eval.tau"), std::string::npos);
}

TEST(Config, UnknownFieldsAndBadJsonAreErrors) {
    EXPECT_THROW(parse_config(R"({"atack": {}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"attack": {"omegaa": 0.1}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"attack": {"omega": "big"}})"), ConfigError);
    EXPECT_THROW(parse_config("[1, 2]"), ConfigError);
    EXPECT_THROW(parse_config("{"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

}  // namespace
}  // namespace cloak
