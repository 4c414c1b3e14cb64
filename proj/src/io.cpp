#include "sgm/io.h"

#include "sgm/binary_io.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sgm {

using nlohmann::json;

void write_keypoints(std::ostream& out, const KeypointSet& kp) {
  if (kp.coords.rows() != kp.descriptors.rows() || (kp.size() > 0 && kp.coords.cols() != 2))
    throw Error(ErrorKind::contract, "keypoints: coords " + kp.coords.shape_string() + " vs descriptors " +
                                         kp.descriptors.shape_string());
  binary::write_magic(out, "SGMK");
  binary::write_u32(out, kKeypointFormatVersion);
  binary::write_u32(out, static_cast<std::uint32_t>(kp.size()));
  binary::write_u32(out, static_cast<std::uint32_t>(kp.descriptor_dim()));
  for (double v : kp.coords.data()) binary::write_f32(out, static_cast<float>(v));
  for (double v : kp.descriptors.data()) binary::write_f32(out, static_cast<float>(v));
}

KeypointSet read_keypoints(std::istream& in) {
  binary::expect_magic(in, "SGMK");
  const std::uint32_t version = binary::read_u32(in, "keypoint version");
  if (version != kKeypointFormatVersion)
    throw Error(ErrorKind::format, "keypoints: unsupported version " + std::to_string(version));
  const std::uint32_t n = binary::read_u32(in, "keypoint count");
  const std::uint32_t d = binary::read_u32(in, "descriptor width");
  if (d == 0 || d > (1u << 16) || n > (1u << 24)) throw Error(ErrorKind::format, "keypoints: implausible header");
  KeypointSet kp{Matrix(n, 2), Matrix(n, d)};
  for (double& v : kp.coords.data()) v = binary::read_f32(in, "coordinates");
  for (double& v : kp.descriptors.data()) v = binary::read_f32(in, "descriptors");
  if (!binary::at_end(in)) throw Error(ErrorKind::format, "keypoints: trailing bytes after payload");
  if (!kp.coords.all_finite() || !kp.descriptors.all_finite())
    throw Error(ErrorKind::format, "keypoints: non-finite values");
  return kp;
}

void save_keypoints(const std::string& path, const KeypointSet& kp) {
  std::ostringstream os(std::ios::binary);
  write_keypoints(os, kp);
  write_text_file(path, os.str());
}

KeypointSet load_keypoints(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  return read_keypoints(in);
}

std::size_t keypoint_file_size(std::size_t n, std::size_t d) { return 16 + 8 * n + 4 * n * d; }

KeypointSet quantize_f32(const KeypointSet& kp) {
  KeypointSet out = kp;
  for (double& v : out.coords.data()) v = static_cast<float>(v);
  for (double& v : out.descriptors.data()) v = static_cast<float>(v);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_schema(const json& j, const char* what) {
  if (!j.is_object() || !j.contains("schema_version"))
    throw Error(ErrorKind::format, std::string(what) + ": missing schema_version");
  if (j.at("schema_version") != kJsonSchemaVersion)
    throw Error(ErrorKind::format, std::string(what) + ": unsupported schema_version");
}

template <class F>
auto json_guard(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string(what) + ": " + e.what());
  }
}

}  // namespace

json ground_truth_to_json(const GroundTruth& gt) {
  json matches = json::array();
  for (const auto& [i, j] : gt.matches) matches.push_back({i, j});
  return {{"schema_version", kJsonSchemaVersion},
          {"matches", matches},
          {"unmatchable_a", gt.unmatchable_a},
          {"unmatchable_b", gt.unmatchable_b}};
}

GroundTruth ground_truth_from_json(const json& j) {
  check_schema(j, "ground truth");
  return json_guard("ground truth", [&] {
    GroundTruth gt;
    for (const json& pair : j.at("matches")) {
      if (!pair.is_array() || pair.size() != 2) throw Error(ErrorKind::format, "ground truth: bad match entry");
      gt.matches.emplace_back(pair[0].get<std::size_t>(), pair[1].get<std::size_t>());
    }
    gt.unmatchable_a = j.at("unmatchable_a").get<std::vector<std::size_t>>();
    gt.unmatchable_b = j.at("unmatchable_b").get<std::vector<std::size_t>>();
    return gt;
  });
}

void RunConfig::validate() const {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw Error(ErrorKind::config, "config: threshold must lie in [0, 1)");
  if (reseed_iterations < 1 || final_iterations < 1)
    throw Error(ErrorKind::config, "config: Sinkhorn iterations must be >= 1");
  if (d == 0 || heads == 0 || d % heads != 0)
    throw Error(ErrorKind::config, "config: heads must divide a positive width");
}

json run_config_to_json(const RunConfig& c) {
  return {{"seed_count", c.seed_count},
          {"threshold", c.threshold},
          {"reseed_iterations", c.reseed_iterations},
          {"final_iterations", c.final_iterations},
          {"d", c.d},
          {"heads", c.heads},
          {"initial_blocks", c.initial_blocks},
          {"refine_blocks", c.refine_blocks},
          {"seed", c.seed},
          {"model_path", c.model_path},
          {"output_path", c.output_path}};
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::config, "config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seed_count") c.seed_count = value.get<int>();
      else if (key == "threshold") c.threshold = value.get<double>();
      else if (key == "reseed_iterations") c.reseed_iterations = value.get<int>();
      else if (key == "final_iterations") c.final_iterations = value.get<int>();
      else if (key == "d") c.d = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "initial_blocks") c.initial_blocks = value.get<std::size_t>();
      else if (key == "refine_blocks") c.refine_blocks = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "model_path") c.model_path = value.get<std::string>();
      else if (key == "output_path") c.output_path = value.get<std::string>();
      else throw Error(ErrorKind::config, "config: unknown key \"" + key + "\"");
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, "config: bad value for \"" + key + "\": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  json j;
  try {
    j = read_json_file(path);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::format) throw Error(ErrorKind::config, e.what());
    throw;
  }
  return run_config_from_json(j, std::move(base));
}

json matches_to_json(const MatchList& matches) {
  json out = json::array();
  for (const Match& m : matches) out.push_back({{"a", m.a}, {"b", m.b}, {"score", m.confidence}});
  return out;
}

MatchList matches_from_json(const json& j) {
  return json_guard("matches", [&] {
    MatchList out;
    for (const json& m : j) out.push_back({m.at("a").get<std::size_t>(), m.at("b").get<std::size_t>(),
                                           m.at("score").get<double>()});
    return out;
  });
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open " + path + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(ErrorKind::io, "write failed: " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::io, "cannot move output into place at " + path + ": " + ec.message());
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::dimension:
    case ErrorKind::contract:
      return 2;
    case ErrorKind::format:
      return 3;
    case ErrorKind::unseedable:
      return 4;
    case ErrorKind::numeric:
      return 5;
    case ErrorKind::io:
      return 1;
  }
  return 1;
}

}  // namespace sgm
