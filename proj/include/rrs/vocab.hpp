#pragma once

// Token layout of the toy language and the fixed prompt pool.

#include "rrs/common.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <stdexcept>
#include <vector>

namespace rrs {

/// Fixed symbolic vocabulary. Categories are numbered 1..14.
struct Vocabulary {
  static constexpr int kSize = 96;

  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kRefuseDirective = 3;
  static constexpr int kPromptWordBegin = 4;
  static constexpr int kPromptWordCount = 12;
  static constexpr int kHarmMarkerBegin = 16;
  static constexpr int kRefusalWordBegin = 30;
  static constexpr int kRefusalWordCount = 10;
  static constexpr int kRefusalToken = 40;
  static constexpr int kAnswerPrefixBegin = 41;
  static constexpr int kBenignMarkerBegin = 55;
  static constexpr int kTopicWordBegin = 69;
  static constexpr int kGenericWordBegin = 83;
  static constexpr int kGenericWordCount = kSize - kGenericWordBegin;

  static constexpr int kResponseLength = 8;

  static constexpr void check_category(int c) {
    if (c < 1 || c > kNumCategories) throw std::out_of_range("category out of range 1..14");
  }
  static constexpr int harm_marker(int c) { return check_category(c), kHarmMarkerBegin + c - 1; }
  static constexpr int benign_marker(int c) { return check_category(c), kBenignMarkerBegin + c - 1; }
  static constexpr int answer_prefix(int c) { return check_category(c), kAnswerPrefixBegin + c - 1; }
  static constexpr int topic_word(int c) { return check_category(c), kTopicWordBegin + c - 1; }
  static constexpr int generic_word(int i) { return kGenericWordBegin + i % kGenericWordCount; }
  static constexpr int prompt_word(int i) { return kPromptWordBegin + i; }

  static constexpr bool is_harm_marker(int t) { return t >= kHarmMarkerBegin && t < kHarmMarkerBegin + kNumCategories; }
  static constexpr bool is_benign_marker(int t) {
    return t >= kBenignMarkerBegin && t < kBenignMarkerBegin + kNumCategories;
  }
  static constexpr bool is_answer_prefix(int t) {
    return t >= kAnswerPrefixBegin && t < kAnswerPrefixBegin + kNumCategories;
  }
  static constexpr int marker_category(int t) {
    if (is_harm_marker(t)) return t - kHarmMarkerBegin + 1;
    if (is_benign_marker(t)) return t - kBenignMarkerBegin + 1;
    return 0;
  }

  /// Templated 8-token answer: the category's prefix, then body words.
  static std::vector<int> answer_response(int c) {
    std::vector<int> r{answer_prefix(c), topic_word(c)};
    for (int i = 0; r.size() < kResponseLength; ++i) r.push_back(generic_word(3 * c + 5 * i));
    return r;
  }

  /// Answer-style continuation of arbitrary length, cycling the template.
  static std::vector<int> answer_prefill(int c, int length) {
    const auto base = answer_response(c);
    std::vector<int> out;
    out.reserve(length);
    for (int i = 0; i < length; ++i) out.push_back(i < kResponseLength ? base[i] : base[1 + (i - 1) % 7]);
    return out;
  }

  /// Refusal response: the refusal token followed by refusal template words.
  static std::vector<int> refusal_response() {
    std::vector<int> r{kRefusalToken};
    for (int i = 0; r.size() < kResponseLength; ++i) r.push_back(kRefusalWordBegin + i);
    return r;
  }

  /// All reserved indices; used to validate the layout.
  static std::vector<int> reserved() {
    std::vector<int> r{kPad, kBos, kEos, kRefuseDirective, kRefusalToken};
    for (int c = 1; c <= kNumCategories; ++c) {
      r.push_back(harm_marker(c));
      r.push_back(benign_marker(c));
      r.push_back(answer_prefix(c));
    }
    return r;
  }

  static void validate() {
    const auto r = reserved();
    if (std::set<int>(r.begin(), r.end()).size() != r.size()) throw std::logic_error("reserved tokens overlap");
    if (kSize < 2 * kNumCategories + kNumCategories + 16) throw std::logic_error("vocabulary too small");
    if (kRefusalToken != 40) throw std::logic_error("refusal token must be index 40");
  }
};

/// Which prompt a rendering used.
enum class PromptKind : std::uint8_t { extraction, directive, pool, minimal };

inline const char* to_string(PromptKind k) {
  switch (k) {
    case PromptKind::extraction: return "t";
    case PromptKind::directive: return "t~";
    case PromptKind::pool: return "pool";
    case PromptKind::minimal: return "bos";
  }
  return "?";
}

/// Ten pool prompts, the extraction prompt and its refusal-directive variant.
/// Every prompt starts with BOS.
class PromptPool {
 public:
  static constexpr std::size_t kPoolSize = 10;

  PromptPool() {
    // Word indices into the prompt-word block. Symbolic stand-ins for
    // "answer/question/audio/follow/instruction/generate/response/provide/
    //  output/content/detailed/steps".
    static constexpr std::array<std::array<int, 5>, kPoolSize> kPool = {{
        {0, 1, 2, -1, -1},
        {3, 4, 2, -1, -1},
        {5, 6, 3, 2, -1},
        {7, 8, 9, 2, -1},
        {5, 6, 1, 2, -1},
        {6, 9, 2, -1, -1},
        {8, 3, 4, 2, -1},
        {5, 6, 2, 7, -1},
        {10, 11, 4, 2, -1},
        {7, 4, 1, 2, -1},
    }};
    for (const auto& words : kPool) {
      std::vector<int> p{Vocabulary::kBos};
      for (int w : words)
        if (w >= 0) p.push_back(Vocabulary::prompt_word(w));
      pool_.push_back(std::move(p));
    }
    extraction_ = {Vocabulary::kBos};
    for (int w : {5, 10, 11, 1, 2}) extraction_.push_back(Vocabulary::prompt_word(w));
    directive_ = extraction_;
    directive_.push_back(Vocabulary::kRefuseDirective);
  }

  const std::vector<std::vector<int>>& pool() const { return pool_; }
  const std::vector<int>& pool(std::size_t i) const { return pool_.at(i); }
  const std::vector<int>& extraction() const { return extraction_; }
  const std::vector<int>& directive() const { return directive_; }
  static std::vector<int> minimal() { return {Vocabulary::kBos}; }

  const std::vector<int>& get(PromptKind kind, std::size_t pool_index = 0) const {
    static const std::vector<int> kMinimal = minimal();
    switch (kind) {
      case PromptKind::extraction: return extraction_;
      case PromptKind::directive: return directive_;
      case PromptKind::pool: return pool(pool_index);
      case PromptKind::minimal: return kMinimal;
    }
    return extraction_;
  }

 private:
  std::vector<std::vector<int>> pool_;
  std::vector<int> extraction_;
  std::vector<int> directive_;
};

inline const PromptPool& prompt_pool() {
  static const PromptPool pool;
  return pool;
}

}  // namespace rrs
