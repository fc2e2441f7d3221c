// On-disk formats: PPM frames, JSON-lines track files, detection lists,
// JSON configs and binary checkpoints. Layouts are documented in FORMATS.md.
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "lbm/assoc.hpp"
#include "lbm/trainer.hpp"

namespace lbm {

/// Malformed input; the message names the file and, when known, the line.
struct FormatError : std::runtime_error {
  FormatError(const std::filesystem::path& file, std::size_t line, const std::string& what);
  FormatError(const std::filesystem::path& file, const std::string& what);
};

/// Writes via a temporary sibling and renames over the target.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes, const std::filesystem::path& source = "<memory>");
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

/// Header plus one record per frame of [x, y, v, rho] per query.
struct TrackFile {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t query_frame = 0;
  std::vector<std::size_t> indices;  // pool indices of the queries, may be empty
  std::size_t frames = 0;
  std::size_t queries = 0;
  std::vector<double> x, y, v, rho;  // [frame * queries + query]

  static TrackFile from_prediction(const PointTrack& track, std::size_t height, std::size_t width);
  static TrackFile from_ground_truth(const TrackTable& gt, std::size_t height, std::size_t width);
  TrackTable table(double vis_threshold = 0.5) const;
};

std::string encode_track_file(const TrackFile& tf);
TrackFile decode_track_file(const std::string& text, const std::filesystem::path& source = "<memory>");
void write_track_file(const std::filesystem::path& path, const TrackFile& tf);
TrackFile read_track_file(const std::filesystem::path& path);

/// One detection per line: frame x1 y1 x2 y2 label score; '#' starts a comment.
std::vector<std::vector<Detection>> parse_detections(const std::string& text, std::size_t frames,
                                                     const std::filesystem::path& source = "<memory>");
std::string encode_detections(const std::vector<std::vector<Detection>>& detections);

std::string encode_config(const TrainConfig& cfg);
TrainConfig decode_config(const std::string& text, const std::filesystem::path& source = "<memory>");

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(TrackerParams<float>& params, const TrainConfig& cfg);
struct LoadedCheckpoint {
  TrainConfig config;
  TrackerParams<float> params;
};
LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::filesystem::path& source = "<memory>");
void save_checkpoint(const std::filesystem::path& path, TrackerParams<float>& params, const TrainConfig& cfg);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Clip directory: frame_000.ppm ... and gt.jsonl.
void write_clip_dir(const std::filesystem::path& dir, const Clip& clip, const std::vector<std::size_t>& queries);
std::vector<Image> read_frames(const std::filesystem::path& dir);

}  // namespace lbm
