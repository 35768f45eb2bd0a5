#include "morphnn/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace morphnn {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in,
                                  const std::string& path) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw IoError("zlib init failed for " + path);
    std::vector<unsigned char> out;
    out.reserve(in.size() * 4);
    std::vector<unsigned char> buf(1 << 16);
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf.data();
        zs.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw IoError("corrupt gzip stream in " + path);
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

std::vector<unsigned char> read_maybe_gz(const std::string& path) {
    std::vector<unsigned char> bytes = read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
        return gunzip(bytes, path);
    return bytes;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                   const std::string& path) {
    if (off + 4 > b.size()) throw IoError("truncated IDX header in " + path);
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

} // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::vector<unsigned char> img = read_maybe_gz(images_path);
    std::vector<unsigned char> lab = read_maybe_gz(labels_path);

    if (be32(img, 0, images_path) != 0x00000803u)
        throw IoError("bad IDX image magic in " + images_path);
    std::size_t n = be32(img, 4, images_path);
    std::size_t h = be32(img, 8, images_path);
    std::size_t w = be32(img, 12, images_path);
    if (img.size() != 16 + n * h * w) throw IoError("truncated IDX image data in " + images_path);

    if (be32(lab, 0, labels_path) != 0x00000801u)
        throw IoError("bad IDX label magic in " + labels_path);
    std::size_t nl = be32(lab, 4, labels_path);
    if (lab.size() != 8 + nl) throw IoError("truncated IDX label data in " + labels_path);
    if (n != nl)
        throw IoError("image/label count mismatch: " + std::to_string(n) + " vs " +
                      std::to_string(nl));

    Dataset ds;
    ds.images = Tensor({n, 1, h, w});
    for (std::size_t i = 0; i < n * h * w; ++i)
        ds.images[i] = static_cast<double>(img[16 + i]) / 255.0;
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(lab[8 + i]);
    return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path,
               const std::string& labels_path) {
    if (ds.images.rank() != 4) throw ShapeError("write_idx: images must be [N x 1 x H x W]");
    std::size_t n = ds.images.extent(0), h = ds.images.extent(2), w = ds.images.extent(3);
    auto put32 = [](std::ofstream& f, std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot write " + images_path);
    put32(fi, 0x00000803u);
    put32(fi, static_cast<std::uint32_t>(n));
    put32(fi, static_cast<std::uint32_t>(h));
    put32(fi, static_cast<std::uint32_t>(w));
    for (std::size_t i = 0; i < n * h * w; ++i) {
        unsigned char b = static_cast<unsigned char>(std::lround(ds.images[i] * 255.0));
        fi.write(reinterpret_cast<char*>(&b), 1);
    }
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot write " + labels_path);
    put32(fl, 0x00000801u);
    put32(fl, static_cast<std::uint32_t>(n));
    for (int v : ds.labels) {
        unsigned char b = static_cast<unsigned char>(v);
        fl.write(reinterpret_cast<char*>(&b), 1);
    }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    std::size_t per = images.size() / images.extent(0);
    std::vector<std::size_t> shape = images.shape();
    shape[0] = indices.size();
    Dataset out;
    out.name = name;
    out.images = Tensor(shape);
    out.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(out.images.data() + i * per, images.data() + indices[i] * per,
                    per * sizeof(double));
        out.labels[i] = labels[indices[i]];
    }
    return out;
}

Dataset Dataset::flattened() const {
    Dataset out;
    out.name = name;
    out.labels = labels;
    std::size_t n = images.extent(0);
    out.images = Tensor({n, images.size() / n},
                        std::vector<double>(images.begin(), images.end()));
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitPlan& plan) {
    if (ds.size() == 0) throw ValueError("split: empty dataset");
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(plan.seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.index(i)]);
    std::size_t n_train =
        static_cast<std::size_t>(std::floor(plan.train_fraction * static_cast<double>(ds.size())));
    std::vector<std::size_t> tr(order.begin(), order.begin() + n_train);
    std::vector<std::size_t> va(order.begin() + n_train, order.end());
    return {ds.subset(tr), ds.subset(va)};
}

BatchStream::BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t shuffle_seed)
    : ds_(&ds), batch_size_(batch_size), rng_(shuffle_seed), order_(ds.size()) {
    if (batch_size_ < 1) throw ValueError("batch size must be >= 1");
    std::iota(order_.begin(), order_.end(), 0);
}

void BatchStream::begin_epoch() {
    for (std::size_t i = order_.size(); i > 1; --i)
        std::swap(order_[i - 1], order_[rng_.index(i)]);
    cursor_ = 0;
}

std::size_t BatchStream::batches_per_epoch() const {
    return (ds_->size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchStream::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    std::size_t take = std::min(batch_size_, order_.size() - cursor_);
    std::vector<std::size_t> idx(order_.begin() + cursor_, order_.begin() + cursor_ + take);
    cursor_ += take;
    Dataset sub = ds_->subset(idx);
    return Batch{std::move(sub.images), std::move(sub.labels)};
}

double regression_target(RegressionFn fn, double x) {
    switch (fn) {
        case RegressionFn::SIN6: return 6.0 * std::sin(x);
        case RegressionFn::SQUARE: return x * x;
        case RegressionFn::LIN20: return 20.0 * x;
    }
    throw ValueError("unknown regression function");
}

RegressionData synth_regression(RegressionFn fn, std::size_t n, double noise_std, double lo,
                                double hi, std::uint64_t seed) {
    if (n < 1) throw ValueError("synth_regression: n must be >= 1");
    if (!(hi > lo)) throw ValueError("synth_regression: empty x range");
    Rng rng(seed);
    RegressionData d{Tensor({n, 1}), Tensor({n, 1})};
    for (std::size_t i = 0; i < n; ++i) {
        double x = rng.uniform(lo, hi);
        d.x[i] = x;
        d.y[i] = regression_target(fn, x) + rng.normal(0.0, noise_std);
    }
    return d;
}

} // namespace morphnn
