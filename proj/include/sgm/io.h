#pragma once

#include "sgm/assignment.h"
#include "sgm/seeding.h"
#include "sgm/training.h"

#include <cstdint>
#include <iosfwd>
#include <json.hpp>
#include <string>

namespace sgm {

inline constexpr int kJsonSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Keypoint file: "SGMK", u32 version, u32 n, u32 d, then n x 2 coordinates
// and n x d descriptors, little-endian float32.

inline constexpr std::uint32_t kKeypointFormatVersion = 1;

void write_keypoints(std::ostream& out, const KeypointSet& kp);
KeypointSet read_keypoints(std::istream& in);  // rejects trailing bytes
void save_keypoints(const std::string& path, const KeypointSet& kp);
KeypointSet load_keypoints(const std::string& path);
std::size_t keypoint_file_size(std::size_t n, std::size_t d);

/// Rounds coordinates and descriptors through float32, i.e. what a file
/// round trip produces.
KeypointSet quantize_f32(const KeypointSet& kp);

// ---------------------------------------------------------------------------
// JSON documents.

nlohmann::json ground_truth_to_json(const GroundTruth& gt);
GroundTruth ground_truth_from_json(const nlohmann::json& j);

/// Run settings shared by the commands. Precedence: command-line flags over
/// a config file over these defaults.
struct RunConfig {
  int seed_count = 0;  // <= 0: round(128 n / 2000), at least 8
  double threshold = kDefaultMatchThreshold;
  int reseed_iterations = kReseedSinkhornIterations;
  int final_iterations = kFinalSinkhornIterations;
  std::size_t d = 128;
  std::size_t heads = 4;
  std::size_t initial_blocks = 6;
  std::size_t refine_blocks = 3;
  std::uint64_t seed = 1;
  std::string model_path;
  std::string output_path;

  void validate() const;
};

nlohmann::json run_config_to_json(const RunConfig& cfg);
/// Overlays keys from `j` onto `base`. Unknown keys and wrong types are
/// config errors.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::string& path, RunConfig base = {});

nlohmann::json matches_to_json(const MatchList& matches);
MatchList matches_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::string& path);
/// Writes to a temporary file, then renames, so failures leave no partial output.
void write_text_file(const std::string& path, const std::string& text);

// ---------------------------------------------------------------------------

/// Process exit code for an error kind: 1 io and other, 2 config/usage,
/// 3 format, 4 unseedable pair, 5 numeric failure.
int exit_code_for(ErrorKind kind);

}  // namespace sgm
