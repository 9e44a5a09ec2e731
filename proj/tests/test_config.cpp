#include "rinv/config.hpp"

#include <gtest/gtest.h>

using namespace rinv;

namespace {

const char* kSample = R"([data]
source = synthetic
train_size = 400
test_size = 200
classes = 3
subset_fraction = 0.25
augmentation = random-rotation

[model]
backbone = steerable
channels = 6 10
pool_after = 0
kernel = 3
n_alpha = 4
head = monomial
monomial_distances = 0 1 2 | 0 2 1
monomial_exponents = 0.5 1 1.25 | 0.1 0.2 0.30000000000000004
dense = 40 20
dropout = 0.1
precision = 64

[train]
optimizer = sgd
lr = 0.01
decay = step
epochs = 7
seed = 12

[selection]
pool = 20
target = 4
schedule = 3:10 2:4
algorithm = connectivity
init = catalog
)";

std::string path_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "";
}

}  // namespace

TEST(Config, ParsesSample) {
  const RunConfig c = parse_config_text(kSample);
  EXPECT_EQ(c.data.train_size, 400u);
  EXPECT_EQ(c.data.subset_fraction, 0.25);
  EXPECT_EQ(c.data.augmentation, Augmentation::random_rotation);
  EXPECT_TRUE(c.train.augment);
  EXPECT_EQ(c.model.classes, 3u);
  EXPECT_EQ(c.model.channels, (std::vector<std::size_t>{6, 10}));
  ASSERT_EQ(c.model.head.monomials.size(), 2u);
  EXPECT_EQ(c.model.head.monomials[1].distances, (std::vector<double>{0, 2, 1}));
  EXPECT_EQ(c.model.head.monomials[1].exponents[2], 0.30000000000000004);
  EXPECT_EQ(c.precision, 64);
  EXPECT_EQ(c.train.optimizer, Optimizer::sgd);
  EXPECT_EQ(c.train.decay, Decay::step);
  EXPECT_EQ(c.selection.seed, 12u);
  ASSERT_EQ(c.selection.schedule.size(), 2u);
  EXPECT_EQ(c.selection.schedule[0].epochs, 3u);
  EXPECT_EQ(c.selection.schedule[0].keep, 10u);
  EXPECT_EQ(c.selection.algorithm, SelectionAlgorithm::connectivity);
  EXPECT_EQ(c.selection.init, PoolInit::catalog);
}

TEST(Config, CanonicalFormIsAFixedPoint) {
  const std::string once = canonical(parse_config_text(kSample));
  const std::string twice = canonical(parse_config_text(once));
  EXPECT_EQ(once, twice);
  EXPECT_EQ(canonical(parse_config_text(canonical(RunConfig{}))), canonical(RunConfig{}));
}

TEST(Config, DefaultsWhenEmpty) {
  const RunConfig c = parse_config_text("");
  EXPECT_EQ(c.model.dense, std::vector<std::size_t>{90});
  EXPECT_EQ(c.train.elastic_net, 1e-7);
  EXPECT_EQ(c.train.optimizer, Optimizer::adam);
  EXPECT_EQ(c.selection.pool, 50u);
  EXPECT_EQ(c.selection.schedule.size(), 2u);
  EXPECT_EQ(c.precision, 32);
}

TEST(Config, UnknownKeysAndSectionsRejected) {
  EXPECT_EQ(path_of("[model]\nwidth = 3\n"), "model.width");
  EXPECT_EQ(path_of("[optimizer]\nlr = 3\n"), "optimizer");
}

TEST(Config, InvalidValuesNameTheField) {
  EXPECT_EQ(path_of("[model]\nkernel = 4\n"), "model.kernel");
  EXPECT_EQ(path_of("[train]\nlr = fast\n"), "train.lr");
  EXPECT_EQ(path_of("[model]\nhead = pooling\n"), "model.head");
  EXPECT_EQ(path_of("[model]\nprecision = 16\n"), "model.precision");
  EXPECT_EQ(path_of("[data]\nsource = idx\n").rfind("data.", 0), 0u);
  EXPECT_EQ(path_of("[model]\nmonomial_distances = 1 2\nmonomial_exponents = 1 1\n"), "model.monomial_distances");
  EXPECT_EQ(path_of("[selection]\nschedule = 10:60 5:5\n").rfind("selection", 0), 0u);
}
