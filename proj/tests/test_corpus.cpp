#include "test_support.hpp"

#include <set>

using namespace rrs;
using rrs::testing::TempDir;

namespace {

std::string serialized(const AlignmentDataset& ds, const std::string& name) {
  TempDir dir(name);
  write_dataset(ds, dir.path());
  return read_file_bytes(dir / "samples.jsonl") + read_file_bytes(dir / "audio.rrst") +
         read_file_bytes(dir / "dataset.json");
}

int hamming(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return -1;
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace

TEST(Vocabulary, ReservedLayout) {
  EXPECT_NO_THROW(Vocabulary::validate());
  EXPECT_EQ(Vocabulary::kRefusalToken, 40);
  const auto r = Vocabulary::reserved();
  EXPECT_EQ(std::set<int>(r.begin(), r.end()).size(), r.size());
  EXPECT_GE(Vocabulary::kSize, 2 * 14 + 14 + 16);
}

TEST(PromptPool, DirectiveAppendsOneToken) {
  const auto& pool = prompt_pool();
  EXPECT_EQ(pool.pool().size(), 10u);
  auto t = pool.extraction();
  t.push_back(Vocabulary::kRefuseDirective);
  EXPECT_EQ(pool.directive(), t);
}

TEST(Corpus, MirrorDefaultScale) {
  const auto ds = gen_mirror(50, 7);
  EXPECT_EQ(ds.count(Label::harmful), 700u);
  EXPECT_EQ(ds.count(Label::benign), 700u);
  EXPECT_EQ(ds.mirror_pairs().size(), 700u);
}

TEST(Corpus, MirrorMinimalCoversEachCategoryOnce) {
  const auto ds = gen_mirror(1, 0);
  ASSERT_EQ(ds.samples.size(), 28u);
  for (Label l : {Label::harmful, Label::benign}) {
    std::multiset<int> cats;
    for (const auto* s : ds.with_label(l)) cats.insert(s->category);
    for (int c = 1; c <= kNumCategories; ++c) EXPECT_EQ(cats.count(c), 1u);
  }
}

TEST(Corpus, MirrorPairsDifferOnlyInMarker) {
  const auto ds = gen_mirror(5, 11);
  for (const auto& [h, b] : ds.mirror_pairs()) {
    ASSERT_EQ(hamming(h->tokens, b->tokens), 1);
    const int pos = h->marker_position();
    EXPECT_EQ(h->tokens[pos], Vocabulary::harm_marker(h->category));
    EXPECT_EQ(b->tokens[pos], Vocabulary::benign_marker(h->category));
    EXPECT_EQ(*b->mirror_id, h->id);
    EXPECT_EQ(*h->mirror_id, b->id);
  }
}

TEST(Corpus, MarkerInvariantsAndLengths) {
  for (const auto& ds : {gen_mirror(3, 1), gen_basic(60, 2), gen_redteam(30, 30, 3)}) {
    for (const auto& s : ds.samples) {
      const auto harm = std::count_if(s.tokens.begin(), s.tokens.end(), Vocabulary::is_harm_marker);
      EXPECT_EQ(harm, s.label == Label::harmful ? 1 : 0) << s.id;
      EXPECT_GE(s.tokens.size(), 4u);
      EXPECT_LE(s.tokens.size(), 12u);
      EXPECT_EQ(s.audio.frames.rows(), static_cast<Eigen::Index>(s.tokens.size()));
    }
  }
}

TEST(Corpus, GeneratorsAreDeterministic) {
  EXPECT_EQ(serialized(gen_mirror(2, 9), "m1"), serialized(gen_mirror(2, 9), "m2"));
  const auto mirror = gen_mirror(2, 9);
  EXPECT_EQ(serialized(gen_parallel(mirror, 4), "p1"), serialized(gen_parallel(mirror, 4), "p2"));
  EXPECT_EQ(serialized(gen_basic(40, 5), "b1"), serialized(gen_basic(40, 5), "b2"));
  EXPECT_EQ(serialized(gen_redteam(10, 10, 6), "r1"), serialized(gen_redteam(10, 10, 6), "r2"));
  EXPECT_NE(serialized(gen_mirror(2, 9), "m3"), serialized(gen_mirror(2, 10), "m4"));
}

TEST(Corpus, ParallelSharesHarmfulHalf) {
  const auto mirror = gen_mirror(50, 7);
  const auto par = gen_parallel(mirror, 8);
  std::set<std::string> mh, mb, ph, pb;
  for (const auto& s : mirror.samples) (s.label == Label::harmful ? mh : mb).insert(s.id);
  for (const auto& s : par.samples) (s.label == Label::harmful ? ph : pb).insert(s.id);
  EXPECT_EQ(ph, mh);
  EXPECT_EQ(pb.size(), 700u);
  for (const auto& s : par.samples) EXPECT_FALSE(s.mirror_id.has_value());
  for (const auto* h : par.with_label(Label::harmful)) EXPECT_EQ(h->tokens, mirror.by_id(h->id).tokens);
}

TEST(Corpus, ParallelBenignIdsDisjointFromMirror) {
  const auto mirror = gen_mirror(1, 0);
  const auto par = gen_parallel(mirror, 0);
  std::set<std::string> mirror_benign;
  for (const auto* s : mirror.with_label(Label::benign)) mirror_benign.insert(s->id);
  std::size_t overlap = 0;
  for (const auto* s : par.with_label(Label::benign)) overlap += mirror_benign.count(s->id);
  EXPECT_EQ(overlap, 0u);
  EXPECT_EQ(par.count(Label::benign), 14u);
}

TEST(Corpus, ParallelRejectsWrongVariant) {
  EXPECT_THROW(gen_parallel(gen_basic(10, 1), 1), std::invalid_argument);
}

TEST(Corpus, CategoryBalance) {
  const auto mirror = gen_mirror(4, 2);
  const auto par = gen_parallel(mirror, 3);
  for (const auto* ds : {&mirror, &par})
    for (Label l : {Label::harmful, Label::benign}) {
      std::map<int, int> counts;
      for (const auto* s : ds->with_label(l)) counts[s->category]++;
      ASSERT_EQ(counts.size(), 14u);
      for (const auto& [c, n] : counts) EXPECT_EQ(n, 4);
    }
}

TEST(Corpus, BasicResponses) {
  const auto ds = gen_basic(1400, 1);
  EXPECT_EQ(ds.samples.size(), 1400u);
  for (const auto& s : ds.samples) {
    ASSERT_EQ(s.response.size(), static_cast<std::size_t>(Vocabulary::kResponseLength));
    if (s.label == Label::harmful)
      EXPECT_EQ(s.response[0], Vocabulary::kRefusalToken);
    else
      EXPECT_TRUE(Vocabulary::is_answer_prefix(s.response[0]));
  }
}

TEST(Corpus, RedTeamCountsAndDisjointness) {
  const auto red = gen_redteam(350, 350, 99);
  EXPECT_EQ(red.samples.size(), 700u);
  EXPECT_EQ(red.count(Label::harmful), 350u);
  std::set<std::string> ids;
  std::set<std::vector<int>> seqs;
  const auto mirror = gen_mirror(50, 7);
  for (const auto& train : {mirror, gen_parallel(mirror, 8), gen_basic(1400, 9)})
    for (const auto& s : train.samples) {
      ids.insert(s.id);
      seqs.insert(s.tokens);
    }
  for (const auto& s : red.samples) {
    EXPECT_EQ(ids.count(s.id), 0u) << s.id;
    EXPECT_EQ(seqs.count(s.tokens), 0u) << s.id;
  }
}

TEST(SynthAudio, ShapeDeterminismAndRange) {
  const std::vector<int> toks = {70, 16, 83, 84, 85};
  const auto a = synth_audio(toks, 3);
  EXPECT_EQ(a.frames.rows(), 5);
  EXPECT_EQ(a.frames.cols(), 16);
  EXPECT_EQ(a.frames, synth_audio(toks, 3).frames);
  EXPECT_LE(a.frames.cwiseAbs().maxCoeff(), 1.0f);
  EXPECT_THROW(synth_audio({}, 3), std::invalid_argument);
}

TEST(SynthAudio, DifferentTokensGiveDifferentFrames) {
  const auto a = synth_audio({70, 16}, 3);
  const auto b = synth_audio({70, 55}, 3);
  EXPECT_GT((a.frames.row(1) - b.frames.row(1)).norm(), 0.0f);
  EXPECT_EQ(a.frames.row(0), b.frames.row(0));
}

TEST(Render, ModeContracts) {
  const auto ds = gen_mirror(1, 4);
  const auto& s = ds.samples.front();
  const auto& t = prompt_pool().extraction();

  const auto text = render(s, Mode::text_only, t);
  EXPECT_EQ(text.audio_count(), 0u);
  EXPECT_EQ(text.frames.rows(), 0);

  const auto audio = render(s, Mode::audio_only, t);
  EXPECT_EQ(audio.token_count(), 1u);
  EXPECT_EQ(audio.ids.front(), Vocabulary::kBos);
  for (std::size_t i = 1; i < audio.size(); ++i) EXPECT_EQ(audio.ids[i], kAudioSlot);

  const auto at = render(s, Mode::audio_text, t);
  EXPECT_EQ(at.size(), t.size() + static_cast<std::size_t>(s.audio.frames.rows()));
  EXPECT_EQ(at.token_count(), t.size());
}

TEST(Corpus, DatasetRoundTrip) {
  TempDir dir("dataset");
  const auto ds = gen_basic(30, 12);
  write_dataset(ds, dir.path());
  const auto back = read_dataset(dir.path());
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.variant, ds.variant);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].id, ds.samples[i].id);
    EXPECT_EQ(back.samples[i].tokens, ds.samples[i].tokens);
    EXPECT_EQ(back.samples[i].response, ds.samples[i].response);
    EXPECT_EQ(back.samples[i].audio.frames, ds.samples[i].audio.frames);
  }
}
