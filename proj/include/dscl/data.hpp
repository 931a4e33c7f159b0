#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dscl/checkpoint.hpp"
#include "dscl/dataset.hpp"
#include "dscl/rng.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

// ---------------------------------------------------------------------------
// Synthetic color/shape rendering
// ---------------------------------------------------------------------------

enum class ShapeKind { circle, square, triangle, cross };

inline std::string kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
        case ShapeKind::cross: return "cross";
    }
    return "unknown";
}

/// Recipe for one rendered class: a filled shape over a noisy background.
/// Sizes are fractions of the image side; jitters are uniform amplitudes.
/// All color/noise combinations must stay inside [0,1] so that rendered
/// pixels need no clamping (their blend is convex).
struct ShapeSpec {
    ShapeKind kind = ShapeKind::circle;
    std::array<double, 3> fill{0.8, 0.1, 0.1};
    double size_min = 0.45;          ///< smallest shape side/diameter, fraction of image side
    double size_max = 0.7;           ///< largest, likewise; must stay below 1
    double position_jitter = 2.0;    ///< max |offset| of the shape centre, pixels
    std::array<double, 3> background{0.5, 0.5, 0.5};
    double background_noise = 0.05;  ///< per-pixel uniform amplitude added to background
    double color_jitter = 0.1;       ///< per-pixel uniform amplitude added to fill

    void validate() const {
        if (!(size_min > 0.0) || size_min > size_max || !(size_max < 1.0))
            throw ConfigError("shape size range must satisfy 0 < min <= max < 1 (shape must fit the canvas)");
        if (position_jitter < 0.0 || background_noise < 0.0 || color_jitter < 0.0)
            throw ConfigError("jitter amplitudes must be non-negative");
        for (int k = 0; k < 3; ++k) {
            if (fill[k] - color_jitter < 0.0 || fill[k] + color_jitter > 1.0)
                throw ConfigError("fill color with jitter must stay within [0,1]");
            if (background[k] - background_noise < 0.0 || background[k] + background_noise > 1.0)
                throw ConfigError("background with noise must stay within [0,1]");
        }
    }
};

namespace detail {

/// Point-in-shape test in centred coordinates; boundaries are inclusive.
/// y grows downward (image convention), so the triangle apex is at -s/2.
inline bool inside_shape(ShapeKind kind, double dx, double dy, double s) {
    const double h = s / 2.0;
    switch (kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= h * h;
        case ShapeKind::square:
            return std::abs(dx) <= h && std::abs(dy) <= h;
        case ShapeKind::triangle:
            // Isoceles triangle spanning the s-by-s box: apex (0,-h), base y=+h.
            return dy >= -h && dy <= h && std::abs(dx) <= (dy + h) / 2.0;
        case ShapeKind::cross: {
            const double t = s / 6.0;  // half-thickness of each bar
            return (std::abs(dx) <= h && std::abs(dy) <= t) ||
                   (std::abs(dy) <= h && std::abs(dx) <= t);
        }
    }
    return false;
}

/// Fraction of pixel (px,py) covered by the shape, from a 4x4 supersample
/// taken at the subcell centres.
inline double coverage(ShapeKind kind, int64_t px, int64_t py, double cx, double cy, double s) {
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy) {
        const double y = static_cast<double>(py) + (sy + 0.5) / 4.0;
        for (int sx = 0; sx < 4; ++sx) {
            const double x = static_cast<double>(px) + (sx + 0.5) / 4.0;
            if (inside_shape(kind, x - cx, y - cy, s)) ++hits;
        }
    }
    return hits / 16.0;
}

}  // namespace detail

/// Render one sample into `out` (3 planes of n*n, row-major). Draw order is
/// fixed — size, centre offsets, then per pixel alternating fill/background
/// draws per channel — so a sample is a pure function of its Rng stream.
template <typename T>
void render_sample(const ShapeSpec& spec, int64_t n, Rng& rng, T* out) {
    const double s = rng.uniform(spec.size_min, spec.size_max) * static_cast<double>(n);
    const double cx = n / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter);
    const double cy = n / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter);
    const int64_t plane = n * n;
    for (int64_t y = 0; y < n; ++y) {
        for (int64_t x = 0; x < n; ++x) {
            const double cov = detail::coverage(spec.kind, x, y, cx, cy, s);
            for (int k = 0; k < 3; ++k) {
                const double f = spec.fill[static_cast<size_t>(k)] +
                                 rng.uniform(-spec.color_jitter, spec.color_jitter);
                const double b = spec.background[static_cast<size_t>(k)] +
                                 rng.uniform(-spec.background_noise, spec.background_noise);
                out[k * plane + y * n + x] = static_cast<T>(cov * f + (1.0 - cov) * b);
            }
        }
    }
}

/// Generate a balanced task: n_per_class samples of each class spec, in class
/// order, labels 0..k-1. Each sample draws from its own derived RNG stream,
/// so generation is bitwise reproducible and order-independent.
template <typename T = float>
Dataset<T> generate_task(const std::vector<ShapeSpec>& classes, int64_t n_per_class,
                         int64_t image_size, uint64_t seed) {
    if (classes.size() < 2) throw ConfigError("generate_task needs at least two classes");
    if (n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
    if (image_size < 4) throw ConfigError("image_size must be at least 4");
    for (const ShapeSpec& c : classes) c.validate();

    const int64_t k = static_cast<int64_t>(classes.size());
    const int64_t N = k * n_per_class;
    const int64_t stride = 3 * image_size * image_size;
    Dataset<T> ds;
    ds.images = Tensor<T>::zeros({N, 3, image_size, image_size});
    ds.labels.reserve(static_cast<size_t>(N));
    for (int64_t c = 0; c < k; ++c) {
        for (int64_t i = 0; i < n_per_class; ++i) {
            const int64_t g = c * n_per_class + i;
            Rng rng(derive_seed(seed, "datagen_sample", static_cast<uint64_t>(g)));
            render_sample(classes[static_cast<size_t>(c)], image_size, rng,
                          ds.images.ptr() + g * stride);
            ds.labels.push_back(c);
        }
        ds.class_names.push_back(kind_name(classes[static_cast<size_t>(c)].kind) + "_" +
                                 std::to_string(c));
    }
    ds.provenance = "generated:seed=" + std::to_string(seed);
    return ds;
}

// ---------------------------------------------------------------------------
// Two-task color/shape benchmark
// ---------------------------------------------------------------------------

template <typename T = float>
struct TaskData {
    Dataset<T> train, test;
};

struct BenchmarkClasses {
    std::vector<std::vector<ShapeSpec>> specs;        ///< [task][class]
    std::vector<std::vector<std::string>> names;      ///< matching class names
};

/// The two-task pairing-swap benchmark: task 1 = {red circle, blue square},
/// task 2 = {blue circle, red square}. Rendering settings are identical
/// everywhere; only the color-shape pairing differs, so per-task marginal
/// color and shape statistics match by construction.
inline BenchmarkClasses fig1_classes() {
    const std::array<double, 3> red{0.8, 0.1, 0.1};
    const std::array<double, 3> blue{0.1, 0.2, 0.8};
    auto make = [](ShapeKind kind, const std::array<double, 3>& fill) {
        ShapeSpec s;
        s.kind = kind;
        s.fill = fill;
        return s;
    };
    BenchmarkClasses bc;
    bc.specs = {{make(ShapeKind::circle, red), make(ShapeKind::square, blue)},
                {make(ShapeKind::circle, blue), make(ShapeKind::square, red)}};
    bc.names = {{"red_circle", "blue_square"}, {"blue_circle", "red_square"}};
    return bc;
}

/// Generate both tasks of the pairing-swap benchmark with train and test
/// splits drawn from independent derived streams.
template <typename T = float>
std::vector<TaskData<T>> fig1_benchmark(int64_t image_size, int64_t n_train_per_class,
                                        int64_t n_test_per_class, uint64_t seed) {
    const BenchmarkClasses bc = fig1_classes();
    std::vector<TaskData<T>> out;
    for (size_t t = 0; t < bc.specs.size(); ++t) {
        TaskData<T> td;
        td.train = generate_task<T>(bc.specs[t], n_train_per_class, image_size,
                                    derive_seed(seed, "fig1_train", t));
        td.test = generate_task<T>(bc.specs[t], n_test_per_class, image_size,
                                   derive_seed(seed, "fig1_test", t));
        td.train.class_names = bc.names[t];
        td.test.class_names = bc.names[t];
        td.train.provenance += ":fig1_train:task=" + std::to_string(t);
        td.test.provenance += ":fig1_test:task=" + std::to_string(t);
        out.push_back(std::move(td));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Corner-aligned bilinear resample of a [C,H,W] image: output pixel (i,j)
/// samples input coordinate (i*(H-1)/(H'-1), j*(W-1)/(W'-1)); a singleton
/// output axis samples coordinate 0. Same-size resize is an exact copy.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int64_t out_h, int64_t out_w) {
    if (img.ndims() != 3)
        throw ShapeError("resize_bilinear expects a [C,H,W] image, got " + dims_str(img.dims));
    if (out_h < 1 || out_w < 1) throw ConfigError("resize target must be positive");
    const int64_t C = img.dims[0], H = img.dims[1], W = img.dims[2];
    if (out_h == H && out_w == W) return img.clone();

    Tensor<T> out = Tensor<T>::zeros({C, out_h, out_w});
    const double sy = out_h > 1 ? static_cast<double>(H - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(W - 1) / static_cast<double>(out_w - 1) : 0.0;
    const T* src = img.ptr();
    T* dst = out.ptr();
    for (int64_t c = 0; c < C; ++c) {
        const T* plane = src + c * H * W;
        for (int64_t i = 0; i < out_h; ++i) {
            const double y = i * sy;
            const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(y), H - 1);
            const int64_t y1 = std::min<int64_t>(y0 + 1, H - 1);
            const double wy = y - static_cast<double>(y0);
            for (int64_t j = 0; j < out_w; ++j) {
                const double x = j * sx;
                const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(x), W - 1);
                const int64_t x1 = std::min<int64_t>(x0 + 1, W - 1);
                const double wx = x - static_cast<double>(x0);
                const double v00 = plane[y0 * W + x0], v01 = plane[y0 * W + x1];
                const double v10 = plane[y1 * W + x0], v11 = plane[y1 * W + x1];
                const double top = (1.0 - wx) * v00 + wx * v01;
                const double bot = (1.0 - wx) * v10 + wx * v11;
                dst[(c * out_h + i) * out_w + j] = static_cast<T>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// PPM (P6) image files
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t ppm_int(std::istream& f, const std::string& path) {
    int c = f.get();
    while (c != std::char_traits<char>::eof() &&
           (std::isspace(static_cast<unsigned char>(c)) || c == '#')) {
        if (c == '#') {
            while (c != std::char_traits<char>::eof() && c != '\n') c = f.get();
        }
        c = f.get();
    }
    if (c == std::char_traits<char>::eof() || !std::isdigit(static_cast<unsigned char>(c)))
        throw FormatError("malformed PPM header in '" + path + "'");
    int64_t v = 0;
    while (c != std::char_traits<char>::eof() && std::isdigit(static_cast<unsigned char>(c))) {
        v = v * 10 + (c - '0');
        if (v > 1'000'000'000) throw FormatError("implausible PPM header value in '" + path + "'");
        c = f.get();
    }
    if (c != std::char_traits<char>::eof()) f.unget();
    return v;
}

}  // namespace detail

/// Write a [3,H,W] image in [0,1] as an 8-bit binary PPM (P6).
template <typename T>
void write_ppm(const std::string& path, const Tensor<T>& img) {
    if (img.ndims() != 3 || img.dims[0] != 3)
        throw ShapeError("write_ppm expects a [3,H,W] image, got " + dims_str(img.dims));
    const int64_t H = img.dims[1], W = img.dims[2], plane = H * W;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    f << "P6\n" << W << " " << H << "\n255\n";
    std::string buf;
    buf.reserve(static_cast<size_t>(3 * plane));
    const T* p = img.ptr();
    for (int64_t i = 0; i < plane; ++i) {
        for (int k = 0; k < 3; ++k) {
            const double v = std::clamp(static_cast<double>(p[k * plane + i]), 0.0, 1.0);
            buf.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw FormatError("short write to '" + path + "'");
}

/// Read a binary PPM (P6) into a [3,H,W] tensor scaled to [0,1]. Supports
/// 1-byte and 2-byte (big-endian, maxval > 255) samples per the format.
template <typename T = float>
Tensor<T> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    char magic[2] = {0, 0};
    f.read(magic, 2);
    if (!f || magic[0] != 'P' || magic[1] != '6')
        throw FormatError("'" + path + "' is not a binary PPM (P6) file");
    const int64_t W = detail::ppm_int(f, path);
    const int64_t H = detail::ppm_int(f, path);
    const int64_t maxval = detail::ppm_int(f, path);
    if (W < 1 || H < 1 || maxval < 1 || maxval > 65535)
        throw FormatError("PPM header out of range in '" + path + "'");
    const int sep = f.get();
    if (sep == std::char_traits<char>::eof() || !std::isspace(static_cast<unsigned char>(sep)))
        throw FormatError("malformed PPM header in '" + path + "'");

    const int bytes_per = maxval > 255 ? 2 : 1;
    const int64_t n = 3 * H * W * bytes_per;
    std::vector<unsigned char> raw(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(raw.data()), n);
    if (f.gcount() != n) throw FormatError("PPM pixel data truncated in '" + path + "'");

    Tensor<T> img = Tensor<T>::zeros({3, H, W});
    T* out = img.ptr();
    const int64_t plane = H * W;
    for (int64_t i = 0; i < plane; ++i) {
        for (int64_t k = 0; k < 3; ++k) {
            const int64_t j = (i * 3 + k) * bytes_per;
            const int64_t v = bytes_per == 1
                                  ? raw[static_cast<size_t>(j)]
                                  : (static_cast<int64_t>(raw[static_cast<size_t>(j)]) << 8) |
                                        raw[static_cast<size_t>(j + 1)];
            out[k * plane + i] = static_cast<T>(static_cast<double>(v) / static_cast<double>(maxval));
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Packed .dsds dataset files
// ---------------------------------------------------------------------------

/// Save a dataset as a packed .dsds file: magic "DSDS", version, N, C, H, W
/// (u32 little-endian), labels (u32 x N), then the raw float32 image buffer.
/// Round-trips bit-exactly for float data.
template <typename T>
void save_dsds(const Dataset<T>& ds, const std::string& path) {
    ds.validate();
    const int64_t N = ds.images.dims[0], C = ds.images.dims[1];
    const int64_t H = ds.images.dims[2], W = ds.images.dims[3];
    if (N > 0xffffffffll || C > 0xffffffffll || H > 0xffffffffll || W > 0xffffffffll)
        throw DataError("dataset too large for the DSDS container");
    std::string buf;
    buf.append("DSDS");
    bytes::put_u32(buf, 1);
    bytes::put_u32(buf, static_cast<uint32_t>(N));
    bytes::put_u32(buf, static_cast<uint32_t>(C));
    bytes::put_u32(buf, static_cast<uint32_t>(H));
    bytes::put_u32(buf, static_cast<uint32_t>(W));
    for (int64_t lab : ds.labels) {
        if (lab < 0 || lab > 0xffffffffll)
            throw DataError("label " + std::to_string(lab) + " not representable in DSDS");
        bytes::put_u32(buf, static_cast<uint32_t>(lab));
    }
    for (const T& v : ds.images.values())
        bytes::put_u32(buf, std::bit_cast<uint32_t>(static_cast<float>(v)));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw FormatError("short write to '" + path + "'");
}

template <typename T = float>
Dataset<T> load_dsds(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 24 || buf.compare(0, 4, "DSDS") != 0)
        throw FormatError("'" + path + "' is not a DSDS dataset file");
    bytes::Reader r(buf);
    r.pos = 4;
    const uint32_t version = r.get_u32();
    if (version != 1)
        throw FormatError("unsupported DSDS version " + std::to_string(version) + " in '" + path + "'");
    const int64_t N = r.get_u32(), C = r.get_u32(), H = r.get_u32(), W = r.get_u32();
    const int64_t numel = N * C * H * W;
    const size_t expected = 24 + static_cast<size_t>(4 * N) + static_cast<size_t>(4 * numel);
    if (buf.size() != expected)
        throw FormatError("DSDS payload size mismatch in '" + path + "' (file " +
                          std::to_string(buf.size()) + " bytes, header implies " +
                          std::to_string(expected) + ")");
    Dataset<T> ds;
    ds.labels.reserve(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) ds.labels.push_back(static_cast<int64_t>(r.get_u32()));
    ds.images = Tensor<T>::zeros({N, C, H, W});
    T* out = ds.images.ptr();
    for (int64_t i = 0; i < numel; ++i)
        out[i] = static_cast<T>(std::bit_cast<float>(r.get_u32()));
    ds.provenance = "file:" + path;
    return ds;
}

// ---------------------------------------------------------------------------
// Directory corpora
// ---------------------------------------------------------------------------

/// Save a dataset to `path`: a ".dsds" path writes the packed container;
/// otherwise a directory of per-class subdirectories of 8-bit PPM images is
/// created (the lossy interchange form).
template <typename T>
void save_dataset(const Dataset<T>& ds, const std::string& path) {
    if (std::string(path).ends_with(".dsds")) {
        save_dsds(ds, path);
        return;
    }
    ds.validate();
    if (ds.images.dims[1] != 3)
        throw DataError("PPM export needs 3-channel images, got " + dims_str(ds.images.dims));
    namespace fs = std::filesystem;
    int64_t n_classes = 0;
    for (int64_t lab : ds.labels) n_classes = std::max(n_classes, lab + 1);
    n_classes = std::max(n_classes, static_cast<int64_t>(ds.class_names.size()));
    auto class_dir = [&](int64_t c) {
        const std::string name = c < static_cast<int64_t>(ds.class_names.size())
                                     ? ds.class_names[static_cast<size_t>(c)]
                                     : "class_" + std::to_string(c);
        return fs::path(path) / name;
    };
    for (int64_t c = 0; c < n_classes; ++c) fs::create_directories(class_dir(c));
    std::vector<int64_t> counter(static_cast<size_t>(n_classes), 0);
    for (int64_t i = 0; i < ds.size(); ++i) {
        const int64_t c = ds.labels[static_cast<size_t>(i)];
        char name[32];
        std::snprintf(name, sizeof(name), "img_%06lld.ppm",
                      static_cast<long long>(counter[static_cast<size_t>(c)]++));
        Tensor<T> img = ds.sample_image(i);
        img.dims = {img.dims[1], img.dims[2], img.dims[3]};
        write_ppm((class_dir(c) / name).string(), img);
    }
}

/// Load a dataset from `path`: either a packed ".dsds" file or a directory of
/// class subdirectories (lexicographic class ids) holding binary PPM images.
/// With input_size > 0 every image is resized to input_size x input_size;
/// otherwise all images must already share one size.
template <typename T = float>
Dataset<T> load_image_dir(const std::string& path, int64_t input_size = -1) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(path)) {
        if (!std::string(path).ends_with(".dsds"))
            throw FormatError("'" + path + "' is neither a directory nor a .dsds file");
        Dataset<T> ds = load_dsds<T>(path);
        if (input_size > 0 && (ds.images.dims[2] != input_size || ds.images.dims[3] != input_size)) {
            const int64_t N = ds.images.dims[0], C = ds.images.dims[1];
            Tensor<T> resized = Tensor<T>::zeros({N, C, input_size, input_size});
            const int64_t in_stride = C * ds.images.dims[2] * ds.images.dims[3];
            const int64_t out_stride = C * input_size * input_size;
            for (int64_t i = 0; i < N; ++i) {
                Tensor<T> img = Tensor<T>::zeros({C, ds.images.dims[2], ds.images.dims[3]});
                std::copy(ds.images.ptr() + i * in_stride, ds.images.ptr() + (i + 1) * in_stride,
                          img.ptr());
                Tensor<T> r = resize_bilinear(img, input_size, input_size);
                std::copy(r.ptr(), r.ptr() + out_stride, resized.ptr() + i * out_stride);
            }
            ds.images = std::move(resized);
        }
        return ds;
    }
    if (!fs::is_directory(path)) throw DataError("'" + path + "' does not exist");

    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("no class subdirectories in '" + path + "'");

    std::vector<Tensor<T>> images;
    Dataset<T> ds;
    for (size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[c]))
            if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty())
            throw DataError("class directory '" + class_dirs[c].string() + "' has no images");
        for (const fs::path& file : files) {
            Tensor<T> img = read_ppm<T>(file.string());
            if (input_size > 0) img = resize_bilinear(img, input_size, input_size);
            images.push_back(std::move(img));
            ds.labels.push_back(static_cast<int64_t>(c));
        }
        ds.class_names.push_back(class_dirs[c].filename().string());
    }
    const Dims& d0 = images.front().dims;
    for (const Tensor<T>& img : images)
        if (img.dims != d0)
            throw DataError("images in '" + path + "' have differing sizes; pass input_size");
    const int64_t N = static_cast<int64_t>(images.size());
    const int64_t stride = numel_of(d0);
    ds.images = Tensor<T>::zeros({N, d0[0], d0[1], d0[2]});
    for (int64_t i = 0; i < N; ++i)
        std::copy(images[static_cast<size_t>(i)].ptr(),
                  images[static_cast<size_t>(i)].ptr() + stride, ds.images.ptr() + i * stride);
    ds.provenance = "dir:" + path;
    return ds;
}

}  // namespace dscl
