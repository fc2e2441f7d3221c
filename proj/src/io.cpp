#include "lbm/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace lbm {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

FormatError::FormatError(const fs::path& file, std::size_t line, const std::string& what)
    : std::runtime_error(file.string() + ":" + std::to_string(line) + ": " + what) {}

FormatError::FormatError(const fs::path& file, const std::string& what) : std::runtime_error(file.string() + ": " + what) {}

void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// PPM

std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + 3 * img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(img.at(c, y, x)), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

Image decode_ppm(const std::string& bytes, const fs::path& source) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P6") throw FormatError(source, 1, "not a binary PPM (P6) file");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw FormatError(source, 1, "malformed PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw FormatError(source, 1, "unsupported PPM geometry or depth");
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + 3 * w * h) throw FormatError(source, "truncated PPM raster");
  Image img;
  img.width = w;
  img.height = h;
  img.data.resize(3 * w * h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = float(static_cast<unsigned char>(bytes[pos++])) / 255.0f;
      }
    }
  }
  return img;
}

void write_ppm(const fs::path& path, const Image& img) {
  atomic_write(path, encode_ppm(img));
}

Image read_ppm(const fs::path& path) {
  return decode_ppm(read_file(path), path);
}

// ---------------------------------------------------------------------------
// Track files

TrackFile TrackFile::from_prediction(const PointTrack& track, std::size_t height, std::size_t width) {
  TrackFile tf;
  tf.width = width;
  tf.height = height;
  tf.frames = track.x.size();
  tf.queries = tf.frames ? track.x[0].size() : 0;
  for (std::size_t f = 0; f < tf.frames; ++f) {
    for (std::size_t q = 0; q < tf.queries; ++q) {
      tf.x.push_back(track.x[f][q]);
      tf.y.push_back(track.y[f][q]);
      tf.v.push_back(track.v[f][q]);
      tf.rho.push_back(track.rho[f][q]);
    }
  }
  return tf;
}

TrackFile TrackFile::from_ground_truth(const TrackTable& gt, std::size_t height, std::size_t width) {
  TrackFile tf;
  tf.width = width;
  tf.height = height;
  tf.frames = gt.frames;
  tf.queries = gt.queries;
  tf.x = gt.x;
  tf.y = gt.y;
  for (const std::uint8_t v : gt.visible) tf.v.push_back(v ? 1.0 : 0.0);
  tf.rho.assign(tf.v.size(), 1.0);
  return tf;
}

TrackTable TrackFile::table(double vis_threshold) const {
  TrackTable t(frames, queries);
  t.x = x;
  t.y = y;
  for (std::size_t i = 0; i < v.size(); ++i) t.visible[i] = v[i] > vis_threshold ? 1 : 0;
  return t;
}

std::string encode_track_file(const TrackFile& tf) {
  ojson header;
  header["format"] = "lbm-track";
  header["version"] = 1;
  header["width"] = tf.width;
  header["height"] = tf.height;
  header["query_frame"] = tf.query_frame;
  ojson queries = ojson::array();
  for (std::size_t q = 0; q < tf.queries; ++q) {
    const std::size_t i = tf.query_frame * tf.queries + q;
    queries.push_back({tf.x[i], tf.y[i]});
  }
  header["queries"] = queries;
  header["indices"] = tf.indices;
  std::string out = header.dump() + "\n";
  for (std::size_t f = 0; f < tf.frames; ++f) {
    ojson rec;
    rec["frame"] = f;
    ojson pts = ojson::array();
    for (std::size_t q = 0; q < tf.queries; ++q) {
      const std::size_t i = f * tf.queries + q;
      pts.push_back({tf.x[i], tf.y[i], tf.v[i], tf.rho[i]});
    }
    rec["points"] = pts;
    out += rec.dump() + "\n";
  }
  return out;
}

TrackFile decode_track_file(const std::string& text, const fs::path& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  TrackFile tf;
  bool have_header = false;
  long last_frame = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ojson rec;
    try {
      rec = ojson::parse(line);
    } catch (const std::exception& e) {
      throw FormatError(source, lineno, std::string("invalid JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (rec.value("format", "") != "lbm-track") throw FormatError(source, lineno, "missing lbm-track header");
        if (rec.at("version").get<int>() != 1) throw FormatError(source, lineno, "unsupported track file version");
        tf.width = rec.at("width").get<std::size_t>();
        tf.height = rec.at("height").get<std::size_t>();
        tf.query_frame = rec.at("query_frame").get<std::size_t>();
        tf.queries = rec.at("queries").size();
        if (rec.contains("indices")) tf.indices = rec.at("indices").get<std::vector<std::size_t>>();
        have_header = true;
        continue;
      }
      const long frame = rec.at("frame").get<long>();
      if (frame != last_frame + 1) throw FormatError(source, lineno, "frame indices must increase by one from 0");
      last_frame = frame;
      const ojson& pts = rec.at("points");
      if (pts.size() != tf.queries) throw FormatError(source, lineno, "query count differs from the header");
      for (const ojson& p : pts) {
        if (p.size() != 4) throw FormatError(source, lineno, "points must be [x, y, v, rho]");
        tf.x.push_back(p[0].get<double>());
        tf.y.push_back(p[1].get<double>());
        tf.v.push_back(p[2].get<double>());
        tf.rho.push_back(p[3].get<double>());
      }
      ++tf.frames;
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(source, lineno, std::string("bad record: ") + e.what());
    }
  }
  if (!have_header) throw FormatError(source, "empty track file");
  return tf;
}

void write_track_file(const fs::path& path, const TrackFile& tf) {
  atomic_write(path, encode_track_file(tf));
}

TrackFile read_track_file(const fs::path& path) {
  return decode_track_file(read_file(path), path);
}

// ---------------------------------------------------------------------------
// Detections

std::vector<std::vector<Detection>> parse_detections(const std::string& text, std::size_t frames, const fs::path& source) {
  std::vector<std::vector<Detection>> out(frames);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    std::string first;
    if (!(fields >> first)) continue;
    long frame = 0;
    Detection d;
    std::istringstream ff(first);
    std::string rest;
    if (!(ff >> frame) || !(ff >> std::ws).eof() || !(fields >> d.box.x1 >> d.box.y1 >> d.box.x2 >> d.box.y2 >> d.label >> d.score) ||
        (fields >> rest)) {
      throw FormatError(source, lineno, "expected: frame x1 y1 x2 y2 label score");
    }
    if (frame < 0 || static_cast<std::size_t>(frame) >= frames) {
      throw FormatError(source, lineno, "frame " + std::to_string(frame) + " outside the " + std::to_string(frames) + "-frame stream");
    }
    if (!(d.box.x2 > d.box.x1 && d.box.y2 > d.box.y1)) throw FormatError(source, lineno, "box must satisfy x2 > x1 and y2 > y1");
    if (!(d.score >= 0 && d.score <= 1)) throw FormatError(source, lineno, "score outside [0, 1]");
    out[static_cast<std::size_t>(frame)].push_back(d);
  }
  return out;
}

std::string encode_detections(const std::vector<std::vector<Detection>>& detections) {
  std::ostringstream out;
  out << "# frame x1 y1 x2 y2 label score\n" << std::fixed << std::setprecision(3);
  for (std::size_t f = 0; f < detections.size(); ++f) {
    for (const Detection& d : detections[f]) {
      out << f << ' ' << d.box.x1 << ' ' << d.box.y1 << ' ' << d.box.x2 << ' ' << d.box.y2 << ' ' << d.label << ' '
          << std::setprecision(6) << d.score << std::setprecision(3) << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Config

namespace {

const char* kind_name(SpriteKind k) {
  switch (k) {
    case SpriteKind::Polygon: return "polygon";
    case SpriteKind::Blob: return "blob";
    case SpriteKind::Mixed: return "mixed";
  }
  return "mixed";
}

SpriteKind kind_from(const std::string& s) {
  if (s == "polygon") return SpriteKind::Polygon;
  if (s == "blob") return SpriteKind::Blob;
  if (s == "mixed") return SpriteKind::Mixed;
  throw std::invalid_argument("unknown sprite kind '" + s + "'");
}

ojson config_json(const TrainConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["warmup"] = c.warmup;
  j["epochs"] = c.epochs;
  j["dataset_size"] = c.dataset_size;
  j["batch"] = c.batch;
  j["queries"] = c.queries;
  j["lambda_cls"] = c.lambda_cls;
  j["clip_norm"] = c.clip_norm;
  ojson clip;
  clip["height"] = c.clip.height;
  clip["width"] = c.clip.width;
  clip["frames"] = c.clip.frames;
  clip["sprites"] = c.clip.sprites;
  clip["kind"] = kind_name(c.clip.kind);
  clip["occluders"] = c.clip.occluders;
  clip["max_speed"] = c.clip.max_speed;
  clip["deform_amplitude"] = c.clip.deform_amplitude;
  clip["deform_frequency"] = c.clip.deform_frequency;
  clip["background_drift"] = {c.clip.background_drift_x, c.clip.background_drift_y};
  clip["pool"] = c.clip.pool;
  j["clip"] = clip;
  ojson m;
  m["feature_dim"] = c.model.feature_dim;
  m["encoder_channels"] = c.model.encoder_channels;
  m["num_layers"] = c.model.num_layers;
  m["memory_length"] = c.model.memory_length;
  m["collision_points"] = c.model.collision_points;
  m["update_offsets"] = c.model.update_offsets;
  m["head_points"] = c.model.head_points;
  m["mlp_ratio"] = c.model.mlp_ratio;
  m["cosine_correlation"] = c.model.cosine_correlation;
  m["cross_attention_every_layer"] = c.model.cross_attention_every_layer;
  j["model"] = m;
  return j;
}

template <class V>
void take(const ojson& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

void reject_unknown(const ojson& j, const ojson& reference, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!reference.contains(it.key())) throw std::invalid_argument("unknown key '" + where + it.key() + "'");
  }
}

}  // namespace

std::string encode_config(const TrainConfig& cfg) {
  return config_json(cfg).dump(2) + "\n";
}

TrainConfig decode_config(const std::string& text, const fs::path& source) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // byte offset -> line number
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const std::size_t line = 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
    throw FormatError(source, line, "invalid JSON");
  }
  TrainConfig c;
  try {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    const ojson ref = config_json(c);
    reject_unknown(j, ref, "");
    take(j, "seed", c.seed);
    take(j, "lr", c.lr);
    take(j, "weight_decay", c.weight_decay);
    take(j, "warmup", c.warmup);
    take(j, "epochs", c.epochs);
    take(j, "dataset_size", c.dataset_size);
    take(j, "batch", c.batch);
    take(j, "queries", c.queries);
    take(j, "lambda_cls", c.lambda_cls);
    take(j, "clip_norm", c.clip_norm);
    if (j.contains("clip")) {
      const ojson& s = j.at("clip");
      reject_unknown(s, ref.at("clip"), "clip.");
      take(s, "height", c.clip.height);
      take(s, "width", c.clip.width);
      take(s, "frames", c.clip.frames);
      take(s, "sprites", c.clip.sprites);
      if (s.contains("kind")) c.clip.kind = kind_from(s.at("kind").get<std::string>());
      take(s, "occluders", c.clip.occluders);
      take(s, "max_speed", c.clip.max_speed);
      take(s, "deform_amplitude", c.clip.deform_amplitude);
      take(s, "deform_frequency", c.clip.deform_frequency);
      if (s.contains("background_drift")) {
        const auto d = s.at("background_drift").get<std::vector<double>>();
        if (d.size() != 2) throw std::invalid_argument("clip.background_drift must have 2 entries");
        c.clip.background_drift_x = d[0];
        c.clip.background_drift_y = d[1];
      }
      take(s, "pool", c.clip.pool);
    }
    if (j.contains("model")) {
      const ojson& m = j.at("model");
      reject_unknown(m, ref.at("model"), "model.");
      take(m, "feature_dim", c.model.feature_dim);
      take(m, "encoder_channels", c.model.encoder_channels);
      take(m, "num_layers", c.model.num_layers);
      take(m, "memory_length", c.model.memory_length);
      take(m, "collision_points", c.model.collision_points);
      take(m, "update_offsets", c.model.update_offsets);
      take(m, "head_points", c.model.head_points);
      take(m, "mlp_ratio", c.model.mlp_ratio);
      take(m, "cosine_correlation", c.model.cosine_correlation);
      take(m, "cross_attention_every_layer", c.model.cross_attention_every_layer);
    }
  } catch (const std::exception& e) {
    throw FormatError(source, e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  Reader(const std::string& bytes, const fs::path& source) : bytes_(bytes), source_(source) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(source_, "truncated checkpoint at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  const fs::path& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(TrackerParams<float>& params, const TrainConfig& cfg) {
  std::string out = "LBMT";
  put_u32(out, kCheckpointVersion);
  const std::string config = encode_config(cfg);
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  const auto named = params.named_parameters();
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(1);  // dtype: f32
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (const std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (const float v : t.data()) put_f32(out, v);
  }
  return out;
}

LoadedCheckpoint decode_checkpoint(const std::string& bytes, const fs::path& source) {
  Reader r(bytes, source);
  if (r.str(4) != "LBMT") throw FormatError(source, "not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(source, "unsupported checkpoint version " + std::to_string(version));
  const std::string config = r.str(r.u32());
  LoadedCheckpoint ck;
  ck.config = decode_config(config, source.string() + "[config]");
  try {
    ck.params = TrackerParams<float>(ck.config.model, 0);
  } catch (const std::exception& e) {
    throw FormatError(source, std::string("invalid model config: ") + e.what());
  }
  auto named = ck.params.named_parameters();
  const std::uint32_t count = r.u32();
  if (count != named.size()) {
    throw FormatError(source, "checkpoint holds " + std::to_string(count) + " tensors, model expects " + std::to_string(named.size()));
  }
  for (auto& [expected, t] : named) {
    const std::string name = r.str(r.u32());
    if (name != expected) throw FormatError(source, "tensor '" + name + "' found where '" + expected + "' was expected");
    if (r.u8() != 1) throw FormatError(source, "tensor '" + name + "' has an unsupported dtype");
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    if (shape != t.shape()) throw FormatError(source, "tensor '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(t.shape()));
    auto data = t.mutable_data();
    for (auto& v : data) {
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError(source, "tensor '" + name + "' holds a non-finite value");
    }
  }
  if (!r.at_end()) throw FormatError(source, "trailing bytes after the tensor table");
  return ck;
}

void save_checkpoint(const fs::path& path, TrackerParams<float>& params, const TrainConfig& cfg) {
  atomic_write(path, encode_checkpoint(params, cfg));
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_file(path), path);
}

// ---------------------------------------------------------------------------
// Clip directories

namespace {

std::string frame_name(std::size_t t) {
  std::ostringstream s;
  s << "frame_" << std::setw(3) << std::setfill('0') << t << ".ppm";
  return s.str();
}

}  // namespace

void write_clip_dir(const fs::path& dir, const Clip& clip, const std::vector<std::size_t>& queries) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < clip.frames.size(); ++t) write_ppm(dir / frame_name(t), clip.frames[t]);
  TrackFile gt = TrackFile::from_ground_truth(select_tracks(clip.tracks, queries), clip.height, clip.width);
  gt.indices = queries;
  write_track_file(dir / "gt.jsonl", gt);
}

std::vector<Image> read_frames(const fs::path& dir) {
  std::vector<Image> frames;
  for (std::size_t t = 0;; ++t) {
    const fs::path p = dir / frame_name(t);
    if (!fs::exists(p)) break;
    frames.push_back(read_ppm(p));
  }
  if (frames.empty()) throw FormatError(dir, "no frame_000.ppm found");
  for (const Image& f : frames) {
    if (f.width != frames[0].width || f.height != frames[0].height) throw FormatError(dir, "frames differ in size");
  }
  return frames;
}

}  // namespace lbm
