#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace smmh;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "smmh_io_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(ModelJson, RoundTripIsExact) {
  auto p = reference_model();
  p.states[2].gp.smoothness = 3;
  p.states[1].gamma.scale = 1.0 / 3.0;
  EXPECT_EQ(model_from_json(model_to_json(p)), p);
  EXPECT_EQ(model_from_json(json::parse(model_to_json(p).dump())), p);
}

TEST(ModelJson, StatesAreOneBased) {
  const auto j = model_to_json(reference_model());
  EXPECT_EQ(j.at("states")[0].at("state").get<int>(), 1);
  EXPECT_EQ(j.at("states")[3].at("state").get<int>(), 4);
}

TEST(ModelJson, FileRoundTrip) {
  const auto path = scratch("model.json");
  save_model(path, smmh::testing::small_model(3));
  EXPECT_EQ(load_model(path), smmh::testing::small_model(3));
}

TEST(ModelJson, MalformedInputRaisesFormatError) {
  EXPECT_THROW(model_from_json(json::parse(R"({"n_states": 4})")), FormatError);
  EXPECT_THROW(model_from_json(json::parse(R"({"n_states": "four", "channels": 1})")), FormatError);
  const auto path = scratch("broken.json");
  write_atomic(path, "{ not json");
  EXPECT_THROW(load_model(path), FormatError);
  EXPECT_THROW(load_model(scratch("does_not_exist.json")), FormatError);
}

TEST(EpisodeJson, MaskedEntriesAreNull) {
  Episode ep;
  ep.id = "m";
  ep.events = {smmh::testing::event(0.25, {1.5, -2.0}), smmh::testing::event(1.0, {3.0, 4.0})};
  ep.events[1].mask = {true, false};
  ep.events[1].y(1) = 0.0;
  ep.censor_time = 2.0;
  ep.label = 1;
  const auto j = episode_to_json(ep);
  EXPECT_TRUE(j.at("events")[1].at("y")[1].is_null());
  EXPECT_EQ(episode_from_json(j), ep);
}

TEST(EpisodeJson, NullWithoutMaskIsMissing) {
  const auto ep = episode_from_json(json::parse(
      R"({"id":"a","censor_time":3,"label":0,"events":[{"t":1,"y":[null,2.5]}]})"));
  ASSERT_EQ(ep.events.size(), 1u);
  EXPECT_EQ(ep.events[0].mask, (std::vector<bool>{false, true}));
  EXPECT_EQ(ep.events[0].y(0), 0.0);
  EXPECT_EQ(ep.events[0].y(1), 2.5);
}

TEST(EpisodeJson, MaskLengthMismatch) {
  EXPECT_THROW(episode_from_json(json::parse(
                   R"({"id":"a","censor_time":3,"label":0,"events":[{"t":1,"y":[1,2],"mask":[true]}]})")),
               FormatError);
}

TEST(EpisodeJson, SampledDatasetRoundTrip) {
  const auto draws = sample_dataset(reference_model(), 500, 2026);
  const auto episodes = smmh::testing::episodes_of(draws);
  const auto path = scratch("episodes.jsonl");
  save_episodes(path, episodes);
  EXPECT_EQ(load_episodes(path), episodes);
  EXPECT_EQ(episodes_to_jsonl(load_episodes(path)), episodes_to_jsonl(episodes));
}

TEST(EpisodeJson, BadLineReportsFormatError) {
  const auto path = scratch("bad.jsonl");
  write_atomic(path, episode_to_json(smmh::testing::episode({1.0})).dump() + "\n{\"id\": \n");
  EXPECT_THROW(load_episodes(path), FormatError);
}

TEST(PathJson, RoundTrip) {
  const auto draws = sample_dataset(reference_model(), 20, 9);
  for (const auto& d : draws) {
    const auto j = path_to_json(d.episode.id, d.path);
    EXPECT_EQ(j.at("states").back().get<int>(), d.path.final_state() + 1);
    const auto [id, path] = path_from_json(json::parse(j.dump()));
    EXPECT_EQ(id, d.episode.id);
    EXPECT_EQ(path, d.path);
  }
}
