#include "dvfi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "dvfi/backends.hpp"
#include "dvfi/error.hpp"
#include "dvfi/metrics.hpp"
#include "dvfi/parallel.hpp"

namespace fs = std::filesystem;

namespace dvfi {

std::array<Image, 3> load_frames(const TripletRecord& triplet, const fs::path& base) {
  std::array<Image, 3> frames;
  if (triplet.frames) {
    frames = *triplet.frames;
  } else {
    for (int i = 0; i < 3; ++i) {
      if (triplet.paths[i].empty()) throw ValidationError("triplet '" + triplet.id + "' has no frame " + std::to_string(i));
      fs::path p(triplet.paths[i]);
      frames[i] = read_pnm(p.is_relative() && !base.empty() ? base / p : p);
    }
  }
  require_same_geometry(frames[0], frames[1], "triplet");
  require_same_geometry(frames[0], frames[2], "triplet");
  return frames;
}

void AnnotationThresholds::validate() const {
  if (!(level4 > level3 && level3 > level2))
    throw ValidationError("annotation thresholds must be strictly descending (t4 > t3 > t2)");
}

double score_from_level(int level) {
  if (level < 1 || level > 4) throw ValidationError("difficulty level must be in 1..4, got " + std::to_string(level));
  return (level - 1) / 3.0;
}

int level_from_score(double score) {
  for (int level = 1; level <= 4; ++level)
    if (std::abs(score - score_from_level(level)) < 1e-9) return level;
  throw ValidationError("score " + std::to_string(score) + " is not one of 0, 1/3, 2/3, 1");
}

int level_from_psnr(double psnr_db, const AnnotationThresholds& t) {
  if (psnr_db >= t.level4) return 4;
  if (psnr_db >= t.level3) return 3;
  if (psnr_db >= t.level2) return 2;
  return 1;
}

DifficultyRecord annotate(const TripletRecord& triplet, const AnnotationThresholds& thresholds, const fs::path& base) {
  thresholds.validate();
  const auto frames = load_frames(triplet, base);
  DifficultyRecord rec;
  rec.triplet = triplet;
  rec.quality_psnr = psnr(interpolate_fast(frames[0], frames[2]), frames[1]);
  rec.level = level_from_psnr(*rec.quality_psnr, thresholds);
  rec.score = score_from_level(rec.level);
  return rec;
}

std::vector<DifficultyRecord> annotate_all(const std::vector<TripletRecord>& triplets,
                                           const AnnotationThresholds& thresholds, int threads, const fs::path& base) {
  thresholds.validate();
  std::vector<DifficultyRecord> out(triplets.size());
  parallel_for(triplets.size(), threads, [&](std::size_t i) { out[i] = annotate(triplets[i], thresholds, base); });
  return out;
}

// ------------------------------------------------------------------ extraction

namespace {

bool is_frame_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

} // namespace

ExtractResult extract_triplets(const fs::path& dir, int stride, bool sliding) {
  if (stride < 1) throw ValidationError("stride must be >= 1");
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_frame_file(entry.path())) files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  ExtractResult result;
  struct Geometry {
    int w, h, c;
    auto operator<=>(const Geometry&) const = default;
  };
  std::vector<std::optional<Geometry>> geom(files.size());
  std::map<Geometry, std::size_t> votes;
  std::vector<Geometry> first_seen;
  for (std::size_t i = 0; i < files.size(); ++i) {
    try {
      const Image img = read_pnm(files[i]);
      geom[i] = Geometry{img.width, img.height, img.channels};
      if (votes[*geom[i]]++ == 0) first_seen.push_back(*geom[i]);
    } catch (const Error& e) {
      result.warnings.push_back(files[i].string() + ": unreadable (" + e.what() + ")");
    }
  }
  if (first_seen.empty()) return result;
  Geometry majority = first_seen.front();
  for (const Geometry& g : first_seen)
    if (votes[g] > votes[majority]) majority = g;
  for (std::size_t i = 0; i < files.size(); ++i)
    if (geom[i] && *geom[i] != majority) {
      result.warnings.push_back(files[i].string() + ": size " + std::to_string(geom[i]->w) + "x" +
                                std::to_string(geom[i]->h) + "x" + std::to_string(geom[i]->c) + " differs from " +
                                std::to_string(majority.w) + "x" + std::to_string(majority.h) + "x" +
                                std::to_string(majority.c));
      geom[i].reset();
    }

  const std::size_t span = 2 * static_cast<std::size_t>(stride);
  const std::size_t step = sliding ? 1 : span + 1;
  for (std::size_t i = 0; i + span < files.size(); i += step) {
    const std::size_t idx[3] = {i, i + stride, i + span};
    if (!geom[idx[0]] || !geom[idx[1]] || !geom[idx[2]]) continue;
    TripletRecord t;
    std::ostringstream id;
    id << dir.filename().string() << '_' << std::setw(6) << std::setfill('0') << i;
    t.id = id.str();
    for (int k = 0; k < 3; ++k) t.paths[k] = files[idx[k]].string();
    t.source = dir.string();
    t.stride = stride;
    result.triplets.push_back(std::move(t));
  }
  return result;
}

// ------------------------------------------------------------------ synthesis

namespace {

class Canvas {
public:
  Canvas(int w, int h, int c) : w_(w), h_(h), c_(c), px_(static_cast<std::size_t>(w) * h * c, 0.0) {}

  double& at(int x, int y, int c) { return px_[(static_cast<std::size_t>(y) * w_ + x) * c_ + c]; }
  double at(int x, int y, int c) const { return px_[(static_cast<std::size_t>(y) * w_ + x) * c_ + c]; }
  int width() const { return w_; }
  int height() const { return h_; }
  int channels() const { return c_; }

  double sample(double x, double y, int c) const {
    x = std::clamp(x, 0.0, w_ - 1.0);
    y = std::clamp(y, 0.0, h_ - 1.0);
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, w_ - 1), y1 = std::min(y0 + 1, h_ - 1);
    const double lx = x - x0, ly = y - y0;
    return (1 - ly) * ((1 - lx) * at(x0, y0, c) + lx * at(x1, y0, c)) +
           ly * ((1 - lx) * at(x0, y1, c) + lx * at(x1, y1, c));
  }

private:
  int w_, h_, c_;
  std::vector<double> px_;
};

// Value noise: random lattice every `cell` px, bilinearly interpolated.
void add_value_noise(Canvas& canvas, int cell, double amplitude, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  const int gw = canvas.width() / cell + 2, gh = canvas.height() / cell + 2;
  for (int c = 0; c < canvas.channels(); ++c) {
    std::vector<double> lattice(static_cast<std::size_t>(gw) * gh);
    for (double& v : lattice) v = u(rng);
    for (int y = 0; y < canvas.height(); ++y)
      for (int x = 0; x < canvas.width(); ++x) {
        const double fx = static_cast<double>(x) / cell, fy = static_cast<double>(y) / cell;
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const double lx = fx - x0, ly = fy - y0;
        auto l = [&](int xx, int yy) { return lattice[static_cast<std::size_t>(yy) * gw + xx]; };
        canvas.at(x, y, c) += (1 - ly) * ((1 - lx) * l(x0, y0) + lx * l(x0 + 1, y0)) +
                              ly * ((1 - lx) * l(x0, y0 + 1) + lx * l(x0 + 1, y0 + 1));
      }
  }
}

void add_shapes(Canvas& canvas, double detail, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(4, 10);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int shapes = count(rng);
  for (int s = 0; s < shapes; ++s) {
    const bool circle = unit(rng) < 0.5;
    const double cx = unit(rng) * canvas.width(), cy = unit(rng) * canvas.height();
    const double rx = 6 + unit(rng) * 26, ry = 6 + unit(rng) * 26;
    const double period = 3 + unit(rng) * 9, phi = unit(rng) * std::numbers::pi;
    const double stripe = unit(rng) < 0.5 ? 45 * detail : 0.0;
    std::array<double, 3> colour{unit(rng) * 255, unit(rng) * 255, unit(rng) * 255};
    for (int y = std::max(0, static_cast<int>(cy - ry)); y < std::min(canvas.height(), static_cast<int>(cy + ry) + 1); ++y)
      for (int x = std::max(0, static_cast<int>(cx - rx)); x < std::min(canvas.width(), static_cast<int>(cx + rx) + 1); ++x) {
        const double nx = (x - cx) / rx, ny = (y - cy) / ry;
        if (circle && nx * nx + ny * ny > 1) continue;
        const double pattern = stripe * std::sin(2 * std::numbers::pi * (x * std::cos(phi) + y * std::sin(phi)) / period);
        for (int c = 0; c < canvas.channels(); ++c) canvas.at(x, y, c) = colour[c % 3] + pattern;
      }
  }
}

Image render(const Canvas& canvas, int size, const std::function<std::pair<double, double>(int, int)>& source) {
  Image img(size, size, canvas.channels());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto [sx, sy] = source(x, y);
      for (int c = 0; c < canvas.channels(); ++c)
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(canvas.sample(sx, sy, c)), 0L, 255L));
    }
  return img;
}

} // namespace

std::string subset_for_bucket(std::size_t i, std::size_t buckets) {
  static const char* names[4] = {"Easy", "Medium", "Hard", "Extreme"};
  if (buckets == 0) return names[0];
  return names[std::min<std::size_t>(3, i * 4 / buckets)];
}

std::vector<TripletRecord> generate_synthetic(int count, const std::vector<double>& magnitudes, std::uint64_t seed,
                                              const SyntheticOptions& options) {
  if (count < 0) throw ValidationError("synthetic count must be >= 0");
  if (magnitudes.empty()) throw ValidationError("at least one motion magnitude is required");
  if (!std::is_sorted(magnitudes.begin(), magnitudes.end()) || magnitudes.front() < 0)
    throw ValidationError("motion magnitudes must be non-negative and ascending");
  if (options.size < 16 || (options.channels != 1 && options.channels != 3))
    throw ValidationError("synthetic frames need size >= 16 and 1 or 3 channels");

  const int margin = static_cast<int>(std::ceil(magnitudes.back())) + 4;
  const int cw = options.size + 2 * margin;
  std::vector<TripletRecord> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t bucket = static_cast<std::size_t>(k) % magnitudes.size();
    const double m = magnitudes[bucket];
    const double detail = 0.3 + 0.7 * unit(rng);

    Canvas canvas(cw, cw, options.channels);
    add_value_noise(canvas, 32, 80, rng);
    for (int y = 0; y < cw; ++y)
      for (int x = 0; x < cw; ++x)
        for (int c = 0; c < options.channels; ++c) canvas.at(x, y, c) += 128;
    add_value_noise(canvas, 6, 50 * detail, rng);
    add_shapes(canvas, detail, rng);
    add_value_noise(canvas, 2, 30 * detail, rng);

    const bool rotate = m > 0 && unit(rng) < options.rotation_fraction;
    std::array<Image, 3> frames;
    if (rotate) {
      const double centre = cw / 2.0;
      const double angle = m / (options.size / std::numbers::sqrt2) * (unit(rng) < 0.5 ? -1 : 1);
      for (int t = 0; t < 3; ++t) {
        const double th = angle * (t - 1) / 2.0, ct = std::cos(th), st = std::sin(th);
        frames[t] = render(canvas, options.size, [&](int x, int y) {
          const double px = x + margin - centre, py = y + margin - centre;
          return std::pair{ct * px + st * py + centre, -st * px + ct * py + centre};
        });
      }
    } else {
      static const int dirs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
      const auto& dir = dirs[std::uniform_int_distribution<int>(0, 3)(rng)];
      const double before = std::floor(m / 2), after = m - before;
      const double shift[3] = {before, 0.0, -after};
      for (int t = 0; t < 3; ++t)
        frames[t] = render(canvas, options.size, [&](int x, int y) {
          return std::pair{x + margin + shift[t] * dir[0], y + margin + shift[t] * dir[1]};
        });
    }

    TripletRecord rec;
    std::ostringstream id;
    id << "syn" << std::setw(6) << std::setfill('0') << k;
    rec.id = id.str();
    rec.frames = std::move(frames);
    rec.source = rotate ? "synthetic:rotation" : "synthetic:translation";
    rec.stride = 1;
    rec.subset = subset_for_bucket(bucket, magnitudes.size());
    rec.motion = m;
    out.push_back(std::move(rec));
  }
  return out;
}

void materialize_frames(std::vector<DifficultyRecord>& records, const fs::path& dir, const fs::path& relative_to) {
  fs::create_directories(dir);
  for (auto& rec : records) {
    auto& t = rec.triplet;
    if (!t.frames) continue;
    for (int k = 0; k < 3; ++k) {
      const Image& img = (*t.frames)[k];
      const fs::path p = dir / (t.id + "_" + std::to_string(k) + (img.channels == 1 ? ".pgm" : ".ppm"));
      write_pnm(img, p);
      t.paths[k] = relative_to.empty() ? p.string() : fs::relative(p, relative_to).string();
    }
  }
}

// ------------------------------------------------------------------ manifest

nlohmann::json to_json(const DifficultyRecord& r) {
  nlohmann::json j = r.extra.is_object() ? r.extra : nlohmann::json::object();
  const auto& t = r.triplet;
  j["id"] = t.id;
  j["frames"] = {t.paths[0], t.paths[1], t.paths[2]};
  j["stride"] = t.stride;
  j["level"] = r.level;
  j["score"] = r.score;
  if (r.quality_psnr) j["quality_psnr"] = *r.quality_psnr;
  if (!t.subset.empty()) j["subset"] = t.subset;
  if (!t.source.empty()) j["source"] = t.source;
  if (t.motion != 0) j["motion"] = t.motion;
  return j;
}

DifficultyRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("record is not a JSON object");
  auto need = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw FormatError(std::string("missing key '") + key + "'");
    return j.at(key);
  };
  DifficultyRecord r;
  try {
    r.triplet.id = need("id").get<std::string>();
    const auto& frames = need("frames");
    if (!frames.is_array() || frames.size() != 3) throw FormatError("'frames' must list three paths");
    for (int k = 0; k < 3; ++k) r.triplet.paths[k] = frames[k].get<std::string>();
    r.triplet.stride = j.value("stride", 1);
    r.level = need("level").get<int>();
    r.score = need("score").get<double>();
    if (j.contains("quality_psnr")) r.quality_psnr = j.at("quality_psnr").get<double>();
    r.triplet.subset = j.value("subset", std::string());
    r.triplet.source = j.value("source", std::string());
    r.triplet.motion = j.value("motion", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad field type: ") + e.what());
  }
  if (r.level < 1 || r.level > 4) throw FormatError("level " + std::to_string(r.level) + " outside 1..4");
  if (std::abs(r.score - score_from_level(r.level)) > 1e-9)
    throw FormatError("score " + std::to_string(r.score) + " does not match level " + std::to_string(r.level));
  if (!r.triplet.subset.empty()) {
    try {
      parse_subset(r.triplet.subset);
    } catch (const ValidationError& e) {
      throw FormatError(e.what());
    }
  }
  static const char* known[] = {"id", "frames", "stride", "level", "score", "quality_psnr", "subset", "source", "motion"};
  for (const auto& [key, value] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) r.extra[key] = value;
  return r;
}

void write_manifest(const std::vector<DifficultyRecord>& records, const fs::path& path) {
  std::vector<const DifficultyRecord*> order;
  for (const auto& r : records) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->triplet.id < b->triplet.id; });
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto* r : order) out << to_json(*r).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<DifficultyRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<DifficultyRecord> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("malformed JSON: ") + e.what(), lineno);
    } catch (const FormatError& e) {
      throw FormatError(e.what(), lineno);
    }
  }
  return out;
}

} // namespace dvfi
