#include "edetr/data.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

namespace edetr {

namespace {

using nlohmann::json;

double urand(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int irand(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace

std::vector<ImageSample> generate_shapes(const ShapesConfig& cfg) {
  if (cfg.image_size < 32)
    throw std::invalid_argument("generate_shapes: image_size " +
                                std::to_string(cfg.image_size) + " < 32");
  if (cfg.num_classes < 1 || cfg.num_classes > 8)
    throw std::invalid_argument("generate_shapes: num_classes must be in [1,8]");
  if (cfg.max_objects < 1)
    throw std::invalid_argument("generate_shapes: max_objects must be >= 1");

  const int s = cfg.image_size;
  std::vector<ImageSample> out;
  out.reserve(cfg.count);
  for (int idx = 0; idx < cfg.count; ++idx) {
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + idx + 1);
    std::vector<double> px(static_cast<size_t>(3) * s * s);
    for (auto& v : px) v = urand(rng, 0.0, 0.25);

    GroundTruth truth;
    int n_obj = irand(rng, 1, cfg.max_objects);
    for (int o = 0; o < n_obj; ++o) {
      int cls = irand(rng, 0, cfg.num_classes - 1);
      int shape_kind = cls % 3;
      double w = urand(rng, 0.18, 0.45);
      double h = urand(rng, 0.18, 0.45);
      double cx = urand(rng, w / 2 + 0.02, 1.0 - w / 2 - 0.02);
      double cy = urand(rng, h / 2 + 0.02, 1.0 - h / 2 - 0.02);
      double col[3] = {urand(rng, 0.55, 1.0), urand(rng, 0.55, 1.0),
                       urand(rng, 0.55, 1.0)};
      col[cls % 3] = 1.0;  // bias the channel by class so colors carry signal

      double x0 = cx - w / 2, y0 = cy - h / 2, x1 = cx + w / 2, y1 = cy + h / 2;
      for (int iy = 0; iy < s; ++iy)
        for (int ix = 0; ix < s; ++ix) {
          double u = (ix + 0.5) / s, v = (iy + 0.5) / s;
          if (u < x0 || u > x1 || v < y0 || v > y1) continue;
          bool inside = false;
          switch (shape_kind) {
            case 0:  // rectangle
              inside = true;
              break;
            case 1: {  // disk (ellipse inscribed in the box)
              double dx = (u - cx) / (w / 2), dy = (v - cy) / (h / 2);
              inside = dx * dx + dy * dy <= 1.0;
              break;
            }
            case 2: {  // triangle: apex top-center, base bottom edge
              double t = (v - y0) / (y1 - y0);  // 0 at apex row
              inside = std::abs(u - cx) <= t * (w / 2);
              break;
            }
          }
          if (inside)
            for (int c = 0; c < 3; ++c) px[(c * s + iy) * s + ix] = col[c];
        }
      truth.boxes.push_back({cx, cy, w, h});
      truth.labels.push_back(cls);
    }

    ImageSample sample;
    sample.pixels = Tensor::from({3, s, s}, std::move(px));
    sample.truth = std::move(truth);
    sample.id = "synthetic_" + std::to_string(cfg.seed) + "_" +
                std::to_string(idx);
    out.push_back(std::move(sample));
  }
  return out;
}

namespace {

const json& need(const json& j, const char* key, const std::string& path) {
  if (!j.contains(key))
    throw std::runtime_error("coco parse error: missing key at " + path + "." +
                             key);
  return j.at(key);
}

}  // namespace

CocoDataset load_coco_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("coco parse error: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("coco parse error: " + std::string(e.what()));
  }

  CocoDataset ds;
  std::map<std::int64_t, int> cat_remap;
  std::map<std::int64_t, std::string> cat_names;
  for (size_t i = 0; i < need(j, "categories", "$").size(); ++i) {
    const auto& c = j["categories"][i];
    std::string p = "categories[" + std::to_string(i) + "]";
    cat_names[need(c, "id", p).get<std::int64_t>()] =
        need(c, "name", p).get<std::string>();
  }
  for (const auto& [id, name] : cat_names) {
    cat_remap[id] = static_cast<int>(ds.category_names.size());
    ds.category_names.push_back(name);
  }

  struct ImgInfo {
    double w, h;
    int index;
  };
  std::map<std::int64_t, ImgInfo> imgs;
  for (size_t i = 0; i < need(j, "images", "$").size(); ++i) {
    const auto& im = j["images"][i];
    std::string p = "images[" + std::to_string(i) + "]";
    std::int64_t id = need(im, "id", p).get<std::int64_t>();
    if (imgs.count(id))
      throw std::runtime_error("coco parse error: duplicate image id " +
                               std::to_string(id) + " at " + p);
    ImageSample sample;
    sample.id = need(im, "file_name", p).get<std::string>();
    imgs[id] = {need(im, "width", p).get<double>(),
                need(im, "height", p).get<double>(),
                static_cast<int>(ds.samples.size())};
    ds.samples.push_back(std::move(sample));
  }

  for (size_t i = 0; i < need(j, "annotations", "$").size(); ++i) {
    const auto& a = j["annotations"][i];
    std::string p = "annotations[" + std::to_string(i) + "]";
    std::int64_t img_id = need(a, "image_id", p).get<std::int64_t>();
    auto it = imgs.find(img_id);
    if (it == imgs.end())
      throw std::runtime_error("coco parse error: unknown image_id at " + p);
    const auto& bb = need(a, "bbox", p);
    if (!bb.is_array() || bb.size() != 4)
      throw std::runtime_error("coco parse error: bad bbox at " + p + ".bbox");
    std::int64_t cat = need(a, "category_id", p).get<std::int64_t>();
    auto cit = cat_remap.find(cat);
    if (cit == cat_remap.end())
      throw std::runtime_error("coco parse error: unknown category_id at " + p);

    double x = bb[0].get<double>(), y = bb[1].get<double>();
    double w = bb[2].get<double>(), h = bb[3].get<double>();
    double iw = it->second.w, ih = it->second.h;
    double x1 = x + w, y1 = y + h;
    if (x < 0 || y < 0 || x1 > iw || y1 > ih) {
      ++ds.clamp_warnings;
      x = std::clamp(x, 0.0, iw);
      y = std::clamp(y, 0.0, ih);
      x1 = std::clamp(x1, 0.0, iw);
      y1 = std::clamp(y1, 0.0, ih);
    }
    BoxCXCYWH box{(x + x1) / 2 / iw, (y + y1) / 2 / ih, (x1 - x) / iw,
                  (y1 - y) / ih};
    auto& t = ds.samples[it->second.index].truth;
    t.boxes.push_back(box);
    t.labels.push_back(cit->second);
  }
  return ds;
}

std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch) {
  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dull + epoch + 17);
  for (int i = count - 1; i > 0; --i) {
    int k = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[i], order[k]);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Minimal PNG writer (8-bit RGB, stored-deflate blocks; no dependencies).

namespace {

std::uint32_t crc32_update(std::uint32_t crc, const std::uint8_t* p, size_t n) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  crc ^= 0xffffffffu;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

void put_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(x >> 24);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back(x & 0xff);
}

void write_chunk(std::ofstream& f, const char type[4],
                 const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> hdr;
  put_be32(hdr, static_cast<std::uint32_t>(payload.size()));
  f.write(reinterpret_cast<const char*>(hdr.data()), 4);
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  f.write(reinterpret_cast<const char*>(body.data()),
          static_cast<std::streamsize>(body.size()));
  std::vector<std::uint8_t> crc;
  put_be32(crc, crc32_update(0, body.data(), body.size()));
  f.write(reinterpret_cast<const char*>(crc.data()), 4);
}

}  // namespace

void write_png(const std::string& path, const Tensor& pixels) {
  if (pixels.ndim() != 3 || pixels.dim(0) != 3)
    throw std::invalid_argument("write_png: need [3,H,W] tensor");
  int h = pixels.dim(1), w = pixels.dim(2);

  // raw scanlines with filter byte 0
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<size_t>(h) * (1 + 3 * w));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(pixels.at({c, y, x}), 0.0, 1.0);
        raw.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
  }

  // zlib stream: stored deflate blocks
  std::vector<std::uint8_t> z{0x78, 0x01};
  size_t off = 0;
  while (off < raw.size()) {
    size_t n = std::min<size_t>(65535, raw.size() - off);
    bool last = off + n == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(n & 0xff);
    z.push_back((n >> 8) & 0xff);
    z.push_back(~n & 0xff);
    z.push_back((~n >> 8) & 0xff);
    z.insert(z.end(), raw.begin() + off, raw.begin() + off + n);
    off += n;
  }
  std::uint32_t a = 1, b = 0;
  for (std::uint8_t v : raw) {
    a = (a + v) % 65521;
    b = (b + a) % 65521;
  }
  put_be32(z, (b << 16) | a);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(w));
  put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB
  write_chunk(f, "IHDR", ihdr);
  write_chunk(f, "IDAT", z);
  write_chunk(f, "IEND", {});
}

void dump_dataset(const std::vector<ImageSample>& samples,
                  const std::string& dir) {
  std::filesystem::create_directories(dir);
  json j;
  j["images"] = json::array();
  j["annotations"] = json::array();
  j["categories"] = json::array();
  static const char* names[3] = {"rectangle", "disk", "triangle"};
  int max_label = 0;
  for (const auto& s : samples)
    for (int l : s.truth.labels) max_label = std::max(max_label, l);
  for (int c = 0; c <= max_label; ++c)
    j["categories"].push_back(
        {{"id", c + 1}, {"name", c < 3 ? names[c] : "shape" + std::to_string(c)}});

  int ann_id = 1;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    int h = s.pixels.defined() ? s.pixels.dim(1) : 0;
    int w = s.pixels.defined() ? s.pixels.dim(2) : 0;
    std::string fname = s.id + ".png";
    if (s.pixels.defined()) write_png(dir + "/" + fname, s.pixels);
    j["images"].push_back({{"id", static_cast<int>(i) + 1},
                           {"file_name", fname},
                           {"width", w},
                           {"height", h}});
    for (size_t k = 0; k < s.truth.boxes.size(); ++k) {
      const auto& b = s.truth.boxes[k];
      j["annotations"].push_back(
          {{"id", ann_id++},
           {"image_id", static_cast<int>(i) + 1},
           {"category_id", s.truth.labels[k] + 1},
           {"bbox", {(b.cx - b.w / 2) * w, (b.cy - b.h / 2) * h, b.w * w,
                     b.h * h}}});
    }
  }
  std::ofstream f(dir + "/annotations.json");
  f << j.dump(1);
}

Tensor read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_png: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (buf.size() < 8 || !std::equal(sig, sig + 8, buf.begin()))
    throw std::runtime_error("read_png: not a PNG: " + path);

  auto be32 = [&](size_t off) {
    return (std::uint32_t(buf[off]) << 24) | (std::uint32_t(buf[off + 1]) << 16) |
           (std::uint32_t(buf[off + 2]) << 8) | std::uint32_t(buf[off + 3]);
  };
  int w = 0, h = 0;
  std::vector<std::uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= buf.size()) {
    std::uint32_t len = be32(pos);
    std::string type(buf.begin() + pos + 4, buf.begin() + pos + 8);
    size_t body = pos + 8;
    if (body + len > buf.size())
      throw std::runtime_error("read_png: truncated chunk in " + path);
    if (type == "IHDR") {
      w = static_cast<int>(be32(body));
      h = static_cast<int>(be32(body + 4));
      if (buf[body + 8] != 8 || buf[body + 9] != 2 || buf[body + 12] != 0)
        throw std::runtime_error(
            "read_png: only 8-bit non-interlaced RGB is supported: " + path);
    } else if (type == "IDAT") {
      idat.insert(idat.end(), buf.begin() + body, buf.begin() + body + len);
    } else if (type == "IEND") {
      break;
    }
    pos = body + len + 4;  // skip CRC
  }
  if (w <= 0 || h <= 0 || idat.size() < 2)
    throw std::runtime_error("read_png: missing IHDR/IDAT in " + path);

  // zlib with stored deflate blocks only (what write_png emits)
  std::vector<std::uint8_t> raw;
  size_t p = 2;
  while (true) {
    if (p + 5 > idat.size())
      throw std::runtime_error("read_png: truncated deflate stream in " + path);
    std::uint8_t hdr = idat[p];
    if ((hdr & 0x06) != 0)
      throw std::runtime_error(
          "read_png: only stored deflate blocks are supported: " + path);
    size_t n = idat[p + 1] | (size_t(idat[p + 2]) << 8);
    if (p + 5 + n > idat.size())
      throw std::runtime_error("read_png: truncated block in " + path);
    raw.insert(raw.end(), idat.begin() + p + 5, idat.begin() + p + 5 + n);
    p += 5 + n;
    if (hdr & 1) break;
  }
  size_t stride = 1 + 3 * static_cast<size_t>(w);
  if (raw.size() != stride * h)
    throw std::runtime_error("read_png: pixel data size mismatch in " + path);

  std::vector<double> pix(3 * static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    if (raw[y * stride] != 0)
      throw std::runtime_error("read_png: unsupported scanline filter in " +
                               path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        pix[(static_cast<size_t>(c) * h + y) * w + x] =
            raw[y * stride + 1 + 3 * x + c] / 255.0;
  }
  return Tensor::from({3, h, w}, std::move(pix));
}

CocoDataset load_dataset(const std::string& dir) {
  CocoDataset ds = load_coco_annotations(dir + "/annotations.json");
  for (auto& s : ds.samples) {
    std::string path = dir + "/" + s.id;
    if (std::filesystem::exists(path)) s.pixels = read_png(path);
  }
  return ds;
}

}  // namespace edetr
