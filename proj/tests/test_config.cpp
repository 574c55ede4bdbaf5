#include <gtest/gtest.h>

#include "peftlab/config.hpp"

using namespace peftlab;

TEST(Config, EmptyObjectIsValid) {
  const RunConfig c = parse_run_config("{}");
  EXPECT_EQ(c.arch, ArchSpec::toy_small());
  EXPECT_EQ(c.adapter.method, Method::lora);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, UnknownKeyNamesFieldAndLine) {
  const std::string text = "{\n  \"adapter\": {\n    \"method\": \"lora\",\n    \"rnak\": 4\n  }\n}\n";
  try {
    parse_run_config(text);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "adapter.rnak");
    EXPECT_EQ(e.line(), 4);
  }
}

TEST(Config, TypeErrorsRejected) {
  EXPECT_THROW(parse_run_config(R"({"adapter":{"rank":"eight"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train":{"epochs":1.5}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"adapter":{"method":"prefix"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"arch":{"preset":"whisper-huge"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"seed":-1})"), ConfigError);
  EXPECT_THROW(parse_run_config("[1,2]"), ConfigError);
  EXPECT_THROW(parse_run_config("{\"seed\": 1,"), ConfigError);
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_THROW(parse_run_config(R"({"adapter":{"rank":0}})"), ValidationError);
  EXPECT_THROW(parse_run_config(R"({"train":{"batch_size":0}})"), ValidationError);
}

TEST(Config, LearningRateNullMeansDefault) {
  const RunConfig c = parse_run_config(R"({"train":{"learning_rate":null}})");
  EXPECT_FALSE(c.train.learning_rate.has_value());
  const RunConfig d = parse_run_config(R"({"train":{"learning_rate":0.01}})");
  EXPECT_EQ(d.train.learning_rate, 0.01);
}

TEST(Config, RenderingRoundTrips) {
  const RunConfig c = parse_run_config(
      R"({"adapter":{"method":"s2lora","rank":4,"alpha1":0.1},"train":{"epochs":2},"data_size":"medium","seed":5})");
  const std::string text = run_config_json(c);
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(run_config_json(back), text);
  EXPECT_EQ(back.adapter.method, Method::s2lora);
  EXPECT_EQ(back.adapter.rank, 4);
  EXPECT_EQ(back.data_size, DataSize::medium);
  EXPECT_EQ(back.seed, 5u);
}
