#pragma once

#include "rrs/common.hpp"

#include <algorithm>
#include <vector>

namespace rrs {

/// Marks a sequence position filled by the next audio frame.
inline constexpr int kAudioSlot = -1;

/// One model input: token ids with audio slots, plus the frames that fill
/// those slots in order.
struct ModelInput {
  std::vector<int> ids;
  Matrix<float> frames;  // one row per audio slot

  std::size_t size() const { return ids.size(); }
  std::size_t audio_count() const {
    return static_cast<std::size_t>(std::count(ids.begin(), ids.end(), kAudioSlot));
  }
  std::size_t token_count() const { return size() - audio_count(); }

  void append(const std::vector<int>& tokens) { ids.insert(ids.end(), tokens.begin(), tokens.end()); }
};

}  // namespace rrs
