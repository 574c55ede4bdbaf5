#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "peftlab/task.hpp"
#include "peftlab/transformer.hpp"

using namespace peftlab;

namespace {

std::set<std::vector<int>> sources(const std::vector<Sample>& v) {
  std::set<std::vector<int>> out;
  for (const auto& s : v) out.insert(s.src);
  return out;
}

}  // namespace

TEST(Permutation, IsDerangement) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto perm = make_permutation(32, seed);
    ASSERT_EQ(perm.size(), 32u);
    std::vector<int> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 32; ++i) {
      EXPECT_EQ(sorted[static_cast<std::size_t>(i)], tokens::kFirstPayload + i);
      EXPECT_NE(perm[static_cast<std::size_t>(i)], tokens::kFirstPayload + i);
    }
  }
}

TEST(Permutation, PerturbedDiffersButStaysBijective) {
  const auto base = make_permutation(32, 1);
  const auto ood = perturb_permutation(base, 0.25, 2);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < base.size(); ++i) changed += base[i] != ood[i];
  EXPECT_GT(changed, 0u);
  std::vector<int> a = base, b = ood;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(Relation, IdentityRemapEqualsCopy) {
  std::vector<int> ident(32);
  std::iota(ident.begin(), ident.end(), tokens::kFirstPayload);
  const std::vector<int> src{3, 9, 20, 34};
  EXPECT_EQ(task_target(TaskKind::remap, src, ident), src);
  EXPECT_EQ(task_target(TaskKind::copy, src, ident), src);
  EXPECT_EQ(task_target(TaskKind::reverse, src, ident), (std::vector<int>{34, 20, 9, 3}));
}

TEST(Relation, RemapAppliesPermutation) {
  const auto perm = make_permutation(32, 5);
  const std::vector<int> src{3, 4, 5};
  const auto tgt = task_target(TaskKind::remap, src, perm);
  for (std::size_t i = 0; i < src.size(); ++i) {
    EXPECT_EQ(tgt[i], perm[static_cast<std::size_t>(src[i] - tokens::kFirstPayload)]);
  }
}

TEST(Data, SplitSizesFollowDataSize) {
  const TaskSpec spec;
  EXPECT_EQ(make_task(spec, 1, DataSize::small).adapt_train.size(), 256u);
  EXPECT_EQ(make_task(spec, 1, DataSize::medium).adapt_train.size(), 1024u);
  EXPECT_EQ(make_task(spec, 1, DataSize::large).adapt_train.size(), 4096u);
}

TEST(Data, SplitsAreDisjointAndSourcesUnique) {
  const TaskSpec spec;
  const TaskData d = make_task(spec, 3, DataSize::medium);
  const std::vector<const std::vector<Sample>*> splits{&d.pretrain, &d.adapt_train, &d.in_domain_eval, &d.ood_eval};
  std::set<std::vector<int>> all;
  std::size_t total = 0;
  for (const auto* s : splits) {
    total += s->size();
    for (const auto& x : sources(*s)) all.insert(x);
  }
  EXPECT_EQ(all.size(), total);
}

TEST(Data, TargetsFollowTheirDomain) {
  const TaskSpec spec;
  const TaskData d = make_task(spec, 4);
  for (const auto& s : d.adapt_train) EXPECT_EQ(s.tgt, task_target(TaskKind::remap, s.src, d.permutation));
  for (const auto& s : d.in_domain_eval) EXPECT_EQ(s.tgt, task_target(TaskKind::remap, s.src, d.permutation));
  for (const auto& s : d.ood_eval) EXPECT_EQ(s.tgt, task_target(TaskKind::remap, s.src, d.ood_permutation));
  EXPECT_NE(d.permutation, d.ood_permutation);
  for (const auto& s : d.pretrain) {
    EXPECT_GE(s.src.size(), static_cast<std::size_t>(spec.min_len));
    EXPECT_LE(s.src.size(), static_cast<std::size_t>(spec.max_len));
    for (int t : s.src) {
      EXPECT_GE(t, tokens::kFirstPayload);
      EXPECT_LE(t, spec.max_token());
    }
  }
}

TEST(Data, Deterministic) {
  const TaskSpec spec;
  const TaskData a = make_task(spec, 9);
  const TaskData b = make_task(spec, 9);
  EXPECT_EQ(a.pretrain, b.pretrain);
  EXPECT_EQ(a.adapt_train, b.adapt_train);
  EXPECT_EQ(a.ood_eval, b.ood_eval);
  EXPECT_NE(make_task(spec, 10).adapt_train, a.adapt_train);
}

TEST(Data, ValidationAndParsing) {
  TaskSpec bad;
  bad.min_len = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  EXPECT_EQ(parse_data_size("medium"), DataSize::medium);
  EXPECT_THROW(parse_data_size("huge"), ValidationError);
  EXPECT_EQ(parse_task_kind("reverse"), TaskKind::reverse);
  EXPECT_THROW(parse_task_kind("sort"), ValidationError);
}
