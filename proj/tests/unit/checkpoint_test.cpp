#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "boltzlab/flow.hpp"

using namespace boltzlab;

namespace {

FlowModel random_model(std::uint64_t seed) {
  FlowConfig cfg;
  cfg.dim = 5;
  cfg.blocks = 3;
  cfg.hidden = 7;
  cfg.sigma = 1.5;
  Rng rng(seed);
  return FlowModel::randomized(cfg, rng);
}

std::string replace_line(std::string text, const std::string& from, const std::string& to) {
  const auto pos = text.find(from);
  EXPECT_NE(pos, std::string::npos);
  return text.replace(pos, from.size(), to);
}

}  // namespace

TEST(Checkpoint, StringRoundTripIsExact) {
  const FlowModel model = random_model(1);
  const FlowModel back = checkpoint_from_string(checkpoint_to_string(model));
  EXPECT_EQ(back.parameters(), model.parameters());
  EXPECT_EQ(back.config().dim, 5);
  EXPECT_EQ(back.config().blocks, 3);
  EXPECT_EQ(back.config().hidden, 7);
  EXPECT_EQ(back.config().sigma, 1.5);
  EXPECT_EQ(checkpoint_to_string(back), checkpoint_to_string(model));
}

TEST(Checkpoint, FileRoundTripReproducesOutputs) {
  const FlowModel model = random_model(2);
  const auto path = std::filesystem::temp_directory_path() / "boltzlab_checkpoint_test.txt";
  save_checkpoint(model, path);
  const FlowModel back = load_checkpoint(path);
  std::filesystem::remove(path);
  Rng rng(3);
  const Eigen::MatrixXd z = rng.normal_matrix(32, 5);
  EXPECT_EQ(back.generate(z).points, model.generate(z).points);
  EXPECT_EQ(back.log_prob(z), model.log_prob(z));
}

TEST(Checkpoint, HeaderOrder) {
  const std::string text = checkpoint_to_string(random_model(4));
  EXPECT_EQ(text.rfind("boltzlab-flow-checkpoint\nformat_version 1\ndim 5\nblock_count 3\nhidden_width 7\n", 0), 0u);
  EXPECT_NE(text.find("\nend\n"), std::string::npos);
}

TEST(Checkpoint, RejectsOtherVersions) {
  const std::string text = replace_line(checkpoint_to_string(random_model(5)), "format_version 1", "format_version 2");
  try {
    (void)checkpoint_from_string(text);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version 2"), std::string::npos);
  }
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string good = checkpoint_to_string(random_model(6));
  EXPECT_THROW((void)checkpoint_from_string(""), CheckpointError);
  EXPECT_THROW((void)checkpoint_from_string("not a checkpoint\n"), CheckpointError);
  EXPECT_THROW((void)checkpoint_from_string(good.substr(0, good.size() / 2)), CheckpointError);
  EXPECT_THROW((void)checkpoint_from_string(replace_line(good, "\nend\n", "\n")), CheckpointError);
  EXPECT_THROW((void)checkpoint_from_string(replace_line(good, "dim 5", "dim 6")), CheckpointError);
  EXPECT_THROW((void)checkpoint_from_string(replace_line(good, "hidden_width 7", "hidden_width x")), CheckpointError);
  EXPECT_THROW((void)load_checkpoint("/nonexistent/boltzlab.ckpt"), CheckpointError);
}
