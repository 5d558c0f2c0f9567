#include "jointvo/harness/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "jointvo/error.hpp"

namespace jointvo {

namespace {

[[noreturn]] void malformed(const std::filesystem::path& file, const std::string& what) {
  throw Error(ErrorCode::kMalformedDataset, file.string() + ": " + what);
}

std::string image_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.pgm", id);
  return buf;
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string token;
  char c = 0;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(c);
  }
  return token;
}

}  // namespace

Pgm read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) malformed(path, "cannot open");
  if (pgm_token(in) != "P5") malformed(path, "not a binary PGM (P5)");
  Pgm img;
  try {
    img.width = std::stoi(pgm_token(in));
    img.height = std::stoi(pgm_token(in));
    img.max_value = std::stoi(pgm_token(in));
  } catch (const std::exception&) {
    malformed(path, "unreadable header");
  }
  if (img.width <= 0 || img.height <= 0 || img.max_value <= 0 || img.max_value > 65535) {
    malformed(path, "invalid header values");
  }
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  const std::size_t bytes_per = img.max_value < 256 ? 1 : 2;
  std::vector<unsigned char> raw(n * bytes_per);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    malformed(path, "truncated pixel data");
  }
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8) | raw[2 * i + 1];
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Pgm& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) malformed(path, "cannot write");
  out << "P5\n" << img.width << " " << img.height << "\n" << img.max_value << "\n";
  const bool wide = img.max_value >= 256;
  std::vector<unsigned char> raw;
  raw.reserve(img.pixels.size() * (wide ? 2 : 1));
  for (const int p : img.pixels) {
    if (wide) raw.push_back(static_cast<unsigned char>(p >> 8));
    raw.push_back(static_cast<unsigned char>(p & 0xFF));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

SourceFrame SyntheticSource::frame(std::size_t index) const {
  RenderedFrame r = render_frame(scene_, index);
  return {index, scene_.frames[index].timestamp, scene_.frames[index].affine.t, std::move(r.image)};
}

std::vector<TrajectoryEntry> SyntheticSource::ground_truth() const {
  std::vector<TrajectoryEntry> out;
  out.reserve(scene_.frames.size());
  for (const SceneFrame& f : scene_.frames) out.push_back(make_entry(f.timestamp, f.pose));
  return out;
}

std::optional<double> SyntheticSource::true_idepth(std::size_t frame, const Vector2& p) const {
  if (frame >= scene_.frames.size()) return std::nullopt;
  const auto hit = cast_ray(scene_, scene_.frames[frame].pose, p);
  if (!hit) return std::nullopt;
  return hit->idepth;
}

DatasetSource::DatasetSource(const std::filesystem::path& root) : root_(root) {
  if (!std::filesystem::is_directory(root)) malformed(root, "not a directory");

  const auto camera_path = root / "camera.txt";
  {
    std::ifstream in(camera_path);
    if (!in) malformed(camera_path, "missing");
    if (!(in >> camera_.fu >> camera_.fv >> camera_.cu >> camera_.cv >> camera_.width >> camera_.height)) {
      malformed(camera_path, "expected 'fu fv cu cv width height'");
    }
    try {
      camera_.validate();
    } catch (const Error& e) {
      malformed(camera_path, e.what());
    }
  }

  const auto times_path = root / "times.txt";
  {
    std::ifstream in(times_path);
    if (!in) malformed(times_path, "missing");
    std::string line;
    int line_no = 0;
    int with_exposure = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      std::istringstream fields(line);
      Entry e;
      if (!(fields >> e.id >> e.timestamp)) {
        malformed(times_path, "line " + std::to_string(line_no) + ": expected 'index timestamp [exposure]'");
      }
      double exposure = 0.0;
      if (fields >> exposure) {
        if (!(exposure > 0.0)) malformed(times_path, "line " + std::to_string(line_no) + ": non-positive exposure");
        e.exposure = exposure;
        ++with_exposure;
      }
      entries_.push_back(e);
    }
    if (entries_.empty()) malformed(times_path, "no frames listed");
    if (with_exposure != 0 && with_exposure != static_cast<int>(entries_.size())) {
      malformed(times_path, "exposure column present on some lines only");
    }
    has_exposure_ = with_exposure != 0;
    if (!has_exposure_) {
      for (Entry& e : entries_) e.exposure = 1.0;
      warnings_.push_back(times_path.string() + ": no exposure column, using t = 1");
    }
  }

  const auto pcalib_path = root / "pcalib.txt";
  if (std::filesystem::exists(pcalib_path)) {
    std::ifstream in(pcalib_path);
    std::array<double, 256> g{};
    for (double& v : g) {
      if (!(in >> v)) malformed(pcalib_path, "expected 256 values");
    }
    double extra = 0.0;
    if (in >> extra) malformed(pcalib_path, "more than 256 values");
    for (std::size_t i = 1; i < g.size(); ++i) {
      if (g[i] < g[i - 1]) malformed(pcalib_path, "response is not monotone");
    }
    response_ = g;
  }

  const auto vignette_path = root / "vignette.pgm";
  if (std::filesystem::exists(vignette_path)) {
    const Pgm v = read_pgm(vignette_path);
    if (v.width != camera_.width || v.height != camera_.height) malformed(vignette_path, "size differs from camera.txt");
    int peak = 0;
    for (const int p : v.pixels) peak = std::max(peak, p);
    if (peak == 0) malformed(vignette_path, "all zero");
    vignette_.resize(v.pixels.size());
    for (std::size_t i = 0; i < v.pixels.size(); ++i) {
      if (v.pixels[i] == 0) malformed(vignette_path, "zero attenuation");
      vignette_[i] = static_cast<double>(v.pixels[i]) / peak;
    }
  }

  const auto gt_path = root / "groundtruth.txt";
  if (std::filesystem::exists(gt_path)) ground_truth_ = read_trajectory(gt_path);

  const auto idepth_path = root / "init_idepth.bin";
  if (std::filesystem::exists(idepth_path)) {
    const std::size_t n = static_cast<std::size_t>(camera_.width) * camera_.height;
    if (std::filesystem::file_size(idepth_path) != n * sizeof(double)) malformed(idepth_path, "wrong size");
    std::ifstream in(idepth_path, std::ios::binary);
    init_idepth_.resize(n);
    in.read(reinterpret_cast<char*>(init_idepth_.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) malformed(idepth_path, "truncated");
  }
}

SourceFrame DatasetSource::frame(std::size_t index) const {
  const Entry& e = entries_.at(index);
  const auto path = root_ / "images" / image_name(e.id);
  const Pgm img = read_pgm(path);
  if (img.width != camera_.width || img.height != camera_.height) malformed(path, "size differs from camera.txt");
  if (response_ && img.max_value > 255) malformed(path, "response calibration needs 8-bit images");
  std::vector<double> values(img.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = response_ ? (*response_)[static_cast<std::size_t>(img.pixels[i])] : img.pixels[i];
    if (!vignette_.empty()) v /= vignette_[i];
    values[i] = v;
  }
  return {index, e.timestamp, e.exposure, ImagePlane(img.width, img.height, std::move(values))};
}

std::optional<double> DatasetSource::true_idepth(std::size_t frame, const Vector2& p) const {
  if (frame != 0 || init_idepth_.empty()) return std::nullopt;
  const int u = static_cast<int>(std::lround(p.x()));
  const int v = static_cast<int>(std::lround(p.y()));
  if (u < 0 || v < 0 || u >= camera_.width || v >= camera_.height) return std::nullopt;
  const double d = init_idepth_[static_cast<std::size_t>(v) * camera_.width + u];
  if (!(d > 0.0)) return std::nullopt;
  return d;
}

void export_dataset(const SyntheticScene& scene, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  const CameraIntrinsics& k = scene.intrinsics;
  {
    std::ofstream out(root / "camera.txt");
    out.precision(17);
    out << k.fu << " " << k.fv << " " << k.cu << " " << k.cv << " " << k.width << " " << k.height << "\n";
  }
  std::ofstream times(root / "times.txt");
  times.precision(17);
  std::vector<TrajectoryEntry> gt;
  for (std::size_t i = 0; i < scene.frames.size(); ++i) {
    const SceneFrame& f = scene.frames[i];
    RenderedFrame r = render_frame(scene, i);
    Pgm img;
    img.width = k.width;
    img.height = k.height;
    img.pixels.resize(r.image.intensities().size());
    for (std::size_t j = 0; j < img.pixels.size(); ++j) img.pixels[j] = static_cast<int>(r.image.intensities()[j]);
    write_pgm(root / "images" / image_name(static_cast<int>(i)), img);
    times << i << " " << f.timestamp << " " << f.affine.t << "\n";
    gt.push_back(make_entry(f.timestamp, f.pose));
    if (i == 0) {
      std::ofstream depth(root / "init_idepth.bin", std::ios::binary);
      depth.write(reinterpret_cast<const char*>(r.idepth.data()),
                  static_cast<std::streamsize>(r.idepth.size() * sizeof(double)));
    }
  }
  write_trajectory(root / "groundtruth.txt", gt);
}

}  // namespace jointvo
