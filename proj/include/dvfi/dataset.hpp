#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dvfi/image.hpp"
#include "json.hpp"

namespace dvfi {

/// Three neighbouring frames, either inline or as file paths.
struct TripletRecord {
  std::string id;
  std::array<std::string, 3> paths;                // empty when inline-only
  std::optional<std::array<Image, 3>> frames;      // inline pixels
  std::string source;
  int stride = 1;
  std::string subset;                              // Easy/Medium/Hard/Extreme, or empty
  double motion = 0;                               // synthetic motion magnitude, px
};

/// Inline frames, or the frames read from `paths` (relative paths resolve
/// against `base`). Throws ShapeError if the three frames differ in size.
std::array<Image, 3> load_frames(const TripletRecord& triplet, const std::filesystem::path& base = {});

struct AnnotationThresholds {
  double level4 = 35.0;
  double level3 = 30.0;
  double level2 = 25.0;

  /// Requires level4 > level3 > level2.
  void validate() const;
};

struct DifficultyRecord {
  TripletRecord triplet;
  int level = 4;
  double score = 1.0; // (level - 1) / 3, higher = easier
  std::optional<double> quality_psnr;
  nlohmann::json extra = nlohmann::json::object(); // unrecognised manifest keys
};

double score_from_level(int level);
int level_from_score(double score);
int level_from_psnr(double psnr_db, const AnnotationThresholds& thresholds);

/// Fast-blend the outer frames, measure PSNR against the true middle, and
/// bucket it into a difficulty level.
DifficultyRecord annotate(const TripletRecord& triplet, const AnnotationThresholds& thresholds = {},
                          const std::filesystem::path& base = {});

/// Order-stable annotation of many triplets on up to `threads` workers.
std::vector<DifficultyRecord> annotate_all(const std::vector<TripletRecord>& triplets,
                                           const AnnotationThresholds& thresholds = {}, int threads = 1,
                                           const std::filesystem::path& base = {});

struct ExtractResult {
  std::vector<TripletRecord> triplets;
  std::vector<std::string> warnings; // one per rejected file
};

/// Triplets (i, i+stride, i+2*stride) over the lexicographically sorted
/// .ppm/.pgm files of `dir`. Sliding windows start at every frame;
/// otherwise windows do not share frames. Unreadable files and files whose
/// size differs from the majority are reported and excluded.
ExtractResult extract_triplets(const std::filesystem::path& dir, int stride, bool sliding = true);

struct SyntheticOptions {
  int size = 128;
  int channels = 3;
  /// Share of moving samples that rotate instead of translate.
  double rotation_fraction = 0.25;
};

/// Textured random scenes moved by the given magnitudes (px between the
/// outer frames). Record k uses magnitudes[k % size]; subsets are assigned
/// by the magnitude's rank (Easy..Extreme).
std::vector<TripletRecord> generate_synthetic(int count, const std::vector<double>& magnitudes, std::uint64_t seed,
                                              const SyntheticOptions& options = {});

/// Subset tag for the i-th of `buckets` ascending magnitudes.
std::string subset_for_bucket(std::size_t i, std::size_t buckets);

/// Writes frames of inline triplets as PPM/PGM under `dir` and fills in
/// their paths (relative to `relative_to`).
void materialize_frames(std::vector<DifficultyRecord>& records, const std::filesystem::path& dir,
                        const std::filesystem::path& relative_to);

/// JSON Lines, one record per line, sorted by id.
void write_manifest(const std::vector<DifficultyRecord>& records, const std::filesystem::path& path);
std::vector<DifficultyRecord> read_manifest(const std::filesystem::path& path);

nlohmann::json to_json(const DifficultyRecord& record);
/// Throws FormatError (without a line number) on schema violations.
DifficultyRecord record_from_json(const nlohmann::json& j);

} // namespace dvfi
