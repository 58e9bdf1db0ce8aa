#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "prat/aidgen.hpp"
#include "prat/serialize.hpp"

namespace prat::aidgen {
namespace {

constexpr double kPi = 3.14159265358979323846;

bool in_polygon(const float* vx, const float* vy, int n, float x, float y) {
  bool inside = false;
  for (int i = 0, j = n - 1; i < n; j = i++) {
    if ((vy[i] > y) != (vy[j] > y) &&
        x < (vx[j] - vx[i]) * (y - vy[i]) / (vy[j] - vy[i]) + vx[i]) {
      inside = !inside;
    }
  }
  return inside;
}

struct ShapeTester {
  int cls;
  float tri_x[3], tri_y[3];
  float star_x[10], star_y[10];

  explicit ShapeTester(int c) : cls(c) {
    for (int i = 0; i < 3; ++i) {
      const double a = kPi / 2 + 2.0 * kPi * i / 3.0;
      tri_x[i] = 1.1f * static_cast<float>(std::cos(a));
      tri_y[i] = 1.1f * static_cast<float>(std::sin(a));
    }
    for (int i = 0; i < 10; ++i) {
      const double a = kPi / 2 + kPi * i / 5.0;
      const float r = (i % 2 == 0) ? 1.15f : 0.48f;
      star_x[i] = r * static_cast<float>(std::cos(a));
      star_y[i] = r * static_cast<float>(std::sin(a));
    }
  }

  bool inside(float x, float y) const {
    const float rr = x * x + y * y;
    switch (cls) {
      case 0:  // disk
        return rr <= 1.f;
      case 1:  // annulus
        return rr <= 1.f && rr >= 0.3f;
      case 2:  // square
        return std::max(std::fabs(x), std::fabs(y)) <= 0.85f;
      case 3:  // triangle
        return in_polygon(tri_x, tri_y, 3, x, y);
      case 4:  // five-point star
        return in_polygon(star_x, star_y, 10, x, y);
      case 5:  // plus
        return (std::fabs(x) <= 0.35f && std::fabs(y) <= 1.05f) ||
               (std::fabs(y) <= 0.35f && std::fabs(x) <= 1.05f);
      case 6: {  // crescent
        const float dx = x - 0.5f;
        return rr <= 1.f && dx * dx + y * y >= 0.64f;
      }
      case 7: {  // two disks
        const float d1 = (x + 0.55f) * (x + 0.55f) + y * y;
        const float d2 = (x - 0.55f) * (x - 0.55f) + y * y;
        return d1 <= 0.23f || d2 <= 0.23f;
      }
      case 8:  // stripes
        return std::fabs(x) <= 1.f && std::fabs(y) <= 1.f &&
               (static_cast<int>(std::floor((x + 1.f) * 2.5f)) % 2 == 0);
      case 9:  // checkerboard
        return std::fabs(x) <= 1.f && std::fabs(y) <= 1.f &&
               ((static_cast<int>(std::floor((x + 1.f) * 2.f)) +
                 static_cast<int>(std::floor((y + 1.f) * 2.f))) %
                    2 ==
                0);
      default:
        throw ConfigError("shapeset supports 10 classes");
    }
  }
};

float luma(const float* rgb) {
  return 0.299f * rgb[0] + 0.587f * rgb[1] + 0.114f * rgb[2];
}

std::string serialize_store(const BenignStore& s) {
  std::ostringstream os(std::ios::binary);
  io::write_bytes(os, "BEN1", 4);
  io::write_u16(os, 1);
  io::write_u64(os, static_cast<uint64_t>(s.count()));
  io::write_u16(os, s.height);
  io::write_u16(os, s.width);
  io::write_u32(os, static_cast<uint32_t>(s.provenance.size()));
  io::write_bytes(os, s.provenance.data(), s.provenance.size());
  const int64_t ib = s.image_bytes();
  for (int i = 0; i < s.count(); ++i) {
    io::write_u16(os, s.labels[static_cast<size_t>(i)]);
    io::write_u8(os, s.split[static_cast<size_t>(i)]);
    io::write_bytes(os, s.pixels.data() + i * ib, static_cast<size_t>(ib));
  }
  return os.str();
}

}  // namespace

Tensor BenignStore::image(int idx) const {
  if (idx < 0 || idx >= count()) throw ContractError("BenignStore::image: index out of range");
  const int64_t ib = image_bytes();
  Tensor t = Tensor::zeros({3, height, width});
  float* p = t.mutable_ptr();
  const uint8_t* src = pixels.data() + idx * ib;
  for (int64_t i = 0; i < ib; ++i) p[i] = src[i] / 255.f;
  return t;
}

std::vector<int> BenignStore::ids_of_split(uint8_t tag) const {
  std::vector<int> ids;
  for (int i = 0; i < count(); ++i) {
    if (split[static_cast<size_t>(i)] == tag) ids.push_back(i);
  }
  return ids;
}

void BenignStore::save(const std::filesystem::path& path) const {
  io::atomic_write(path, serialize_store(*this));
}

uint64_t BenignStore::checksum() const {
  const std::string bytes = serialize_store(*this);
  return io::fnv1a(bytes.data(), bytes.size());
}

BenignStore BenignStore::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  io::read_bytes(is, magic, 4);
  if (std::string(magic, 4) != "BEN1") {
    throw FormatError("bad magic in " + path.string() + " at byte offset 0");
  }
  const uint16_t version = io::read_u16(is);
  if (version != 1) throw FormatError("unsupported benign store version");
  BenignStore s;
  const uint64_t n = io::read_u64(is);
  s.height = io::read_u16(is);
  s.width = io::read_u16(is);
  const uint32_t plen = io::read_u32(is);
  s.provenance.resize(plen);
  if (plen) io::read_bytes(is, s.provenance.data(), plen);
  const int64_t ib = s.image_bytes();
  s.labels.resize(n);
  s.split.resize(n);
  s.pixels.resize(n * static_cast<uint64_t>(ib));
  for (uint64_t i = 0; i < n; ++i) {
    s.labels[i] = io::read_u16(is);
    s.split[i] = io::read_u8(is);
    io::read_bytes(is, s.pixels.data() + i * static_cast<uint64_t>(ib),
                   static_cast<size_t>(ib));
  }
  return s;
}

BenignStore shapeset_generate(int n_per_class, int classes, int size, uint64_t seed) {
  if (n_per_class < 1) throw ConfigError("shapeset: n_per_class must be >= 1");
  if (classes != 10) throw ConfigError("shapeset renders exactly 10 classes");
  if (size < 8) throw ConfigError("shapeset: size too small");
  BenignStore store;
  store.height = static_cast<uint16_t>(size);
  store.width = static_cast<uint16_t>(size);
  store.provenance = "shapeset";
  const int total = n_per_class * classes;
  const int64_t ib = store.image_bytes();
  store.pixels.resize(static_cast<size_t>(total) * static_cast<size_t>(ib));
  store.labels.resize(static_cast<size_t>(total));
  store.split.assign(static_cast<size_t>(total), kSplitTrain);

  std::vector<ShapeTester> testers;
  for (int c = 0; c < classes; ++c) testers.emplace_back(c);

  constexpr int kSS = 3;  // supersampling grid per output pixel
  std::vector<float> img(static_cast<size_t>(ib));

  for (int idx = 0; idx < total; ++idx) {
    const int cls = idx % classes;
    const int instance = idx / classes;
    Rng rng(Rng::derive({seed, static_cast<uint64_t>(cls), static_cast<uint64_t>(instance)}),
            0x5e);
    const float cx = rng.uniform(0.38f, 0.62f);
    const float cy = rng.uniform(0.38f, 0.62f);
    const float rad = rng.uniform(0.24f, 0.36f);
    const float theta = rng.uniform(0.f, static_cast<float>(2.0 * kPi));
    float bg[3], fg[3];
    for (float& v : bg) v = rng.uniform(0.f, 1.f);
    bool ok = false;
    for (int tries = 0; tries < 20 && !ok; ++tries) {
      for (float& v : fg) v = rng.uniform(0.f, 1.f);
      ok = std::fabs(luma(fg) - luma(bg)) >= 0.25f;
    }
    if (!ok) {
      for (int c = 0; c < 3; ++c) fg[c] = 1.f - bg[c];
    }
    const float ct = std::cos(-theta), st = std::sin(-theta);
    const ShapeTester& tester = testers[static_cast<size_t>(cls)];
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSS; ++sy) {
          for (int sx = 0; sx < kSS; ++sx) {
            const float u = (x + (sx + 0.5f) / kSS) / size - cx;
            const float v = (y + (sy + 0.5f) / kSS) / size - cy;
            const float qx = (u * ct - v * st) / rad;
            const float qy = (u * st + v * ct) / rad;
            if (tester.inside(qx, qy)) ++hits;
          }
        }
        const float cov = static_cast<float>(hits) / (kSS * kSS);
        for (int c = 0; c < 3; ++c) {
          img[static_cast<size_t>(c * size * size + y * size + x)] =
              bg[c] + cov * (fg[c] - bg[c]);
        }
      }
    }
    uint8_t* dst = store.pixels.data() + static_cast<int64_t>(idx) * ib;
    for (int64_t i = 0; i < ib; ++i) {
      const float noisy = img[static_cast<size_t>(i)] + rng.uniform(-0.05f, 0.05f);
      const float clamped = std::min(1.f, std::max(0.f, noisy));
      dst[i] = static_cast<uint8_t>(std::lround(clamped * 255.f));
    }
    store.labels[static_cast<size_t>(idx)] = static_cast<uint16_t>(cls);
  }
  return store;
}

BenignStore read_external_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<int64_t>(is.tellg());
  constexpr int64_t kRecord = 1 + 3 * 32 * 32;
  if (bytes <= 0 || bytes % kRecord != 0) {
    throw FormatError("external corpus " + path.string() + " size " + std::to_string(bytes) +
                      " is not a multiple of " + std::to_string(kRecord));
  }
  is.seekg(0);
  const auto n = bytes / kRecord;
  BenignStore s;
  s.provenance = "external";
  s.labels.resize(static_cast<size_t>(n));
  s.split.assign(static_cast<size_t>(n), kSplitTrain);
  s.pixels.resize(static_cast<size_t>(n * (kRecord - 1)));
  for (int64_t i = 0; i < n; ++i) {
    s.labels[static_cast<size_t>(i)] = io::read_u8(is);
    io::read_bytes(is, s.pixels.data() + i * (kRecord - 1), kRecord - 1);
  }
  return s;
}

void split_benign(BenignStore& store, double train_fraction, uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("split_benign: train_fraction must be in (0,1)");
  }
  const int classes = 1 + *std::max_element(store.labels.begin(), store.labels.end());
  std::vector<std::vector<int>> by_class(static_cast<size_t>(classes));
  for (int i = 0; i < store.count(); ++i) {
    by_class[store.labels[static_cast<size_t>(i)]].push_back(i);
  }
  Rng rng(seed, 0x51);
  for (int c = 0; c < classes; ++c) {
    auto& ids = by_class[static_cast<size_t>(c)];
    if (ids.size() < 2) {
      throw ConfigError("split_benign: class " + std::to_string(c) + " has fewer than 2 images");
    }
    rng.shuffle(ids);
    const auto n = static_cast<int>(ids.size());
    int n_train = static_cast<int>(std::lround(train_fraction * n));
    n_train = std::min(n - 1, std::max(1, n_train));
    for (int i = 0; i < n; ++i) {
      store.split[static_cast<size_t>(ids[static_cast<size_t>(i)])] =
          i < n_train ? kSplitTrain : kSplitTest;
    }
  }
}

}  // namespace prat::aidgen
