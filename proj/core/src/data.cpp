#include "mdf/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "mdf/error.hpp"

namespace fs = std::filesystem;

namespace mdf {

// ---------------------------------------------------------------- labels ---

namespace {

std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

double parse_real(std::string_view tok, std::string_view line) {
    double v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
        throw Error(Errc::non_numeric, "'" + std::string(tok) + "' is not a number in label '" + std::string(line) + "'");
    }
    return v;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io_failure, "short write to " + path.string());
}

}  // namespace

LabeledBox parse_yolo_label(std::string_view line) {
    const auto f = split_ws(line);
    if (f.size() != 5) {
        throw Error(Errc::field_count, "expected 5 fields, got " + std::to_string(f.size()) + " in '" + std::string(line) + "'");
    }
    LabeledBox b;
    auto [ptr, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), b.class_id);
    if (ec != std::errc() || ptr != f[0].data() + f[0].size()) {
        throw Error(Errc::non_numeric, "class id '" + std::string(f[0]) + "' is not an integer");
    }
    if (b.class_id < 0) throw Error(Errc::out_of_range, "negative class id in '" + std::string(line) + "'");
    b.cx = parse_real(f[1], line);
    b.cy = parse_real(f[2], line);
    b.w = parse_real(f[3], line);
    b.h = parse_real(f[4], line);
    for (double v : {b.cx, b.cy, b.w, b.h}) {
        if (v < 0.0 || v > 1.0) throw Error(Errc::out_of_range, "coordinate outside [0, 1] in '" + std::string(line) + "'");
    }
    if (b.w <= 0.0 || b.h <= 0.0) throw Error(Errc::out_of_range, "box without area in '" + std::string(line) + "'");
    return b;
}

std::string format_yolo_label(const LabeledBox& b) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f", b.class_id, b.cx, b.cy, b.w, b.h);
    return buf;
}

std::vector<LabeledBox> read_label_file(const fs::path& path) {
    std::vector<LabeledBox> boxes;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (split_ws(line).empty()) continue;
        boxes.push_back(parse_yolo_label(line));
    }
    return boxes;
}

void write_label_file(const fs::path& path, const std::vector<LabeledBox>& boxes) {
    std::string text;
    for (const auto& b : boxes) text += format_yolo_label(b) + "\n";
    write_file(path, text);
}

// ------------------------------------------------------------------- PPM ---

std::string encode_ppm(const Image& img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    return out;
}

Image decode_ppm(std::string_view bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
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
    if (token() != "P6") throw Error(Errc::io_failure, "not a binary PPM (P6) image");
    auto number = [&]() {
        const auto t = token();
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (ec != std::errc() || ptr != t.data() + t.size()) throw Error(Errc::io_failure, "bad PPM header");
        return v;
    };
    const std::size_t w = number(), h = number(), maxval = number();
    if (maxval != 255 || w == 0 || h == 0) throw Error(Errc::io_failure, "unsupported PPM header");
    ++pos;  // single whitespace before the raster
    if (bytes.size() < pos + w * h * 3) throw Error(Errc::io_failure, "truncated PPM raster");
    Image img(w, h);
    std::copy_n(bytes.data() + pos, w * h * 3, reinterpret_cast<char*>(img.rgb.data()));
    return img;
}

void write_ppm(const fs::path& path, const Image& img) { write_file(path, encode_ppm(img)); }

Image read_ppm(const fs::path& path) { return decode_ppm(read_file(path)); }

// --------------------------------------------------------------- dataset ---

const fs::path& DatasetSpec::split_dir(std::string_view split) const {
    if (split == "train") return train;
    if (split == "val") return val;
    if (split == "test") return test;
    throw Error(Errc::invalid_argument, "unknown split '" + std::string(split) + "'");
}

DatasetSpec load_dataset_yaml(const fs::path& path) {
    if (!fs::exists(path)) throw Error(Errc::io_failure, "dataset YAML not found: " + path.string());
    YAML::Node root;
    try {
        root = YAML::LoadFile(path.string());
    } catch (const YAML::Exception& e) {
        throw Error(Errc::io_failure, "cannot parse " + path.string() + ": " + e.what());
    }
    DatasetSpec spec;
    spec.yaml_path = fs::absolute(path);
    fs::path base = spec.yaml_path.parent_path();
    if (root["path"]) base = base / root["path"].as<std::string>();
    for (const char* key : {"train", "val", "test"}) {
        if (!root[key]) throw Error(Errc::invalid_argument, std::string("dataset YAML lacks '") + key + "'");
    }
    spec.train = (base / root["train"].as<std::string>()).lexically_normal();
    spec.val = (base / root["val"].as<std::string>()).lexically_normal();
    spec.test = (base / root["test"].as<std::string>()).lexically_normal();
    if (root["names"]) {
        spec.names.clear();
        const auto names = root["names"];
        if (names.IsSequence()) {
            for (const auto& n : names) spec.names.push_back(n.as<std::string>());
        } else if (names.IsMap()) {
            std::map<int, std::string> ordered;
            for (const auto& kv : names) ordered[kv.first.as<int>()] = kv.second.as<std::string>();
            for (const auto& [_, n] : ordered) spec.names.push_back(n);
        }
    }
    if (root["nc"] && root["nc"].as<std::size_t>() != spec.names.size()) {
        throw Error(Errc::invalid_argument, "nc does not match the number of class names in " + path.string());
    }
    if (root["imgsz"]) spec.image_size = root["imgsz"].as<std::size_t>();
    return spec;
}

void write_dataset_yaml(const fs::path& path, const DatasetSpec& spec) {
    const fs::path base = fs::absolute(path).parent_path();
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "train" << YAML::Value << fs::relative(spec.train, base).generic_string();
    out << YAML::Key << "val" << YAML::Value << fs::relative(spec.val, base).generic_string();
    out << YAML::Key << "test" << YAML::Value << fs::relative(spec.test, base).generic_string();
    out << YAML::Key << "nc" << YAML::Value << spec.names.size();
    out << YAML::Key << "imgsz" << YAML::Value << spec.image_size;
    out << YAML::Key << "names" << YAML::Value << YAML::Flow << spec.names;
    out << YAML::EndMap;
    write_file(path, std::string(out.c_str()) + "\n");
}

fs::path label_path_for(const fs::path& image) {
    std::vector<fs::path> parts(image.begin(), image.end());
    for (std::size_t i = parts.size(); i-- > 0;) {
        if (parts[i] == "images") {
            parts[i] = "labels";
            break;
        }
    }
    fs::path out;
    for (const auto& p : parts) out /= p;
    out.replace_extension(".txt");
    return out;
}

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(Errc::io_failure, "image directory not found: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<fs::path> resolve_source(const fs::path& source) {
    if (fs::is_directory(source)) return list_images(source);
    if (source.extension() == ".yaml" || source.extension() == ".yml") return list_images(load_dataset_yaml(source).test);
    if (fs::is_regular_file(source)) return {source};
    throw Error(Errc::io_failure, "no such image source: " + source.string());
}

std::vector<LabeledImage> load_split(const DatasetSpec& spec, std::string_view split) {
    std::vector<LabeledImage> items;
    for (const auto& p : list_images(spec.split_dir(split))) {
        LabeledImage item;
        item.image = read_ppm(p);
        const auto lp = label_path_for(p);
        if (fs::exists(lp)) item.boxes = read_label_file(lp);
        for (const auto& b : item.boxes) {
            if (static_cast<std::size_t>(b.class_id) >= spec.names.size()) {
                throw Error(Errc::out_of_range, lp.string() + ": class " + std::to_string(b.class_id) + " but only " +
                                                    std::to_string(spec.names.size()) + " names");
            }
        }
        items.push_back(std::move(item));
    }
    return items;
}

// ---------------------------------------------------------- augmentation ---

bool AugmentParams::all_zero() const {
    return hsv_h == 0 && hsv_s == 0 && hsv_v == 0 && mosaic == 0 && mixup == 0 && degrees == 0 && translate == 0;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0;
    if (d == 0) {
        h = 0;
    } else if (mx == r) {
        h = 60.0 * std::fmod((g - b) / d + 6.0, 6.0);
    } else if (mx == g) {
        h = 60.0 * ((b - r) / d + 2.0);
    } else {
        h = 60.0 * ((r - g) / d + 4.0);
    }
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    const double c = v * s, hp = h / 60.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1)), m = v - c;
    double r1 = 0, g1 = 0, b1 = 0;
    switch (static_cast<int>(hp) % 6) {
        case 0: r1 = c, g1 = x; break;
        case 1: r1 = x, g1 = c; break;
        case 2: g1 = c, b1 = x; break;
        case 3: g1 = x, b1 = c; break;
        case 4: r1 = x, b1 = c; break;
        default: r1 = c, b1 = x; break;
    }
    r = r1 + m, g = g1 + m, b = b1 + m;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

/// Forward affine map in pixel space: p' = A p + t.
struct Affine {
    double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;
    void apply(double x, double y, double& ox, double& oy) const {
        ox = a * x + b * y + tx;
        oy = c * x + d * y + ty;
    }
};

LabeledImage warp(const LabeledImage& item, const Affine& m) {
    const Image& src = item.image;
    const std::size_t W = src.width, H = src.height;
    LabeledImage out;
    out.image = Image(W, H, kFillValue);
    const double det = m.a * m.d - m.b * m.c;
    // Inverse map for sampling.
    const double ia = m.d / det, ib = -m.b / det, ic = -m.c / det, id = m.a / det;
    auto sample = [&](long x, long y, std::size_t ch) -> double {
        if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return kFillValue;
        return src.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), ch);
    };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double px = static_cast<double>(x) + 0.5 - m.tx, py = static_cast<double>(y) + 0.5 - m.ty;
            const double u = ia * px + ib * py - 0.5, v = ic * px + id * py - 0.5;
            const double fu = std::floor(u), fv = std::floor(v);
            const double wu = u - fu, wv = v - fv;
            const long x0 = static_cast<long>(fu), y0 = static_cast<long>(fv);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double val = sample(x0, y0, ch);
                if (wu != 0.0 || wv != 0.0) {
                    val = (1 - wv) * ((1 - wu) * sample(x0, y0, ch) + wu * sample(x0 + 1, y0, ch)) +
                          wv * ((1 - wu) * sample(x0, y0 + 1, ch) + wu * sample(x0 + 1, y0 + 1, ch));
                }
                out.image.at(x, y, ch) = to_byte(val);
            }
        }

    const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
    for (const auto& b : item.boxes) {
        const double xs[2] = {(b.cx - b.w / 2) * Wd, (b.cx + b.w / 2) * Wd};
        const double ys[2] = {(b.cy - b.h / 2) * Hd, (b.cy + b.h / 2) * Hd};
        double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
        for (double cx : xs)
            for (double cy : ys) {
                double ox, oy;
                m.apply(cx, cy, ox, oy);
                x0 = std::min(x0, ox), x1 = std::max(x1, ox), y0 = std::min(y0, oy), y1 = std::max(y1, oy);
            }
        const double area = (x1 - x0) * (y1 - y0);
        const double cx0 = std::clamp(x0, 0.0, Wd), cx1 = std::clamp(x1, 0.0, Wd);
        const double cy0 = std::clamp(y0, 0.0, Hd), cy1 = std::clamp(y1, 0.0, Hd);
        const double clipped = (cx1 - cx0) * (cy1 - cy0);
        if (area <= 0 || clipped <= 0 || clipped < kMinBoxAreaFraction * area) continue;
        out.boxes.push_back({b.class_id, (cx0 + cx1) / 2 / Wd, (cy0 + cy1) / 2 / Hd, (cx1 - cx0) / Wd, (cy1 - cy0) / Hd});
    }
    return out;
}

double beta_sample(std::mt19937_64& rng, double a, double b) {
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    const double x = ga(rng), y = gb(rng);
    return x / (x + y);
}

}  // namespace

void hsv_gain(Image& img, double gain_h, double gain_s, double gain_v) {
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
        double h, s, v;
        rgb_to_hsv(img.rgb[3 * i] / 255.0, img.rgb[3 * i + 1] / 255.0, img.rgb[3 * i + 2] / 255.0, h, s, v);
        h = std::fmod(h * gain_h, 360.0);
        if (h < 0) h += 360.0;
        s = std::clamp(s * gain_s, 0.0, 1.0);
        v = std::clamp(v * gain_v, 0.0, 1.0);
        double r, g, b;
        hsv_to_rgb(h, s, v, r, g, b);
        img.rgb[3 * i] = to_byte(r * 255.0);
        img.rgb[3 * i + 1] = to_byte(g * 255.0);
        img.rgb[3 * i + 2] = to_byte(b * 255.0);
    }
}

LabeledImage translate(const LabeledImage& item, double dx, double dy) {
    Affine m;
    m.tx = dx * static_cast<double>(item.image.width);
    m.ty = dy * static_cast<double>(item.image.height);
    return warp(item, m);
}

LabeledImage rotate(const LabeledImage& item, double degrees) {
    const double t = degrees * std::numbers::pi / 180.0;
    const double cw = static_cast<double>(item.image.width) / 2, ch = static_cast<double>(item.image.height) / 2;
    Affine m;
    m.a = std::cos(t), m.b = std::sin(t), m.c = -std::sin(t), m.d = std::cos(t);
    m.tx = cw - m.a * cw - m.b * ch;
    m.ty = ch - m.c * cw - m.d * ch;
    return warp(item, m);
}

LabeledImage mosaic4(std::span<const LabeledImage, 4> items) {
    const std::size_t W = items[0].image.width, H = items[0].image.height;
    if (W % 2 || H % 2) throw Error(Errc::invalid_size, "mosaic needs even image sizes");
    for (const auto& it : items) {
        if (it.image.width != W || it.image.height != H) throw Error(Errc::invalid_size, "mosaic images differ in size");
    }
    LabeledImage out;
    out.image = Image(W, H);
    for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t ox = (q % 2) * W / 2, oy = (q / 2) * H / 2;
        const Image& src = items[q].image;
        for (std::size_t y = 0; y < H / 2; ++y)
            for (std::size_t x = 0; x < W / 2; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    const int s = src.at(2 * x, 2 * y, c) + src.at(2 * x + 1, 2 * y, c) + src.at(2 * x, 2 * y + 1, c) +
                                  src.at(2 * x + 1, 2 * y + 1, c);
                    out.image.at(ox + x, oy + y, c) = static_cast<std::uint8_t>((s + 2) / 4);
                }
        for (const auto& b : items[q].boxes) {
            out.boxes.push_back({b.class_id, b.cx / 2 + 0.5 * static_cast<double>(q % 2),
                                 b.cy / 2 + 0.5 * static_cast<double>(q / 2), b.w / 2, b.h / 2});
        }
    }
    return out;
}

LabeledImage mixup(const LabeledImage& a, const LabeledImage& b, double lam) {
    if (a.image.width != b.image.width || a.image.height != b.image.height) {
        throw Error(Errc::invalid_size, "mixup images differ in size");
    }
    LabeledImage out;
    out.image = Image(a.image.width, a.image.height);
    for (std::size_t i = 0; i < out.image.rgb.size(); ++i) out.image.rgb[i] = to_byte(lam * a.image.rgb[i] + (1 - lam) * b.image.rgb[i]);
    out.boxes = a.boxes;
    out.boxes.insert(out.boxes.end(), b.boxes.begin(), b.boxes.end());
    return out;
}

LabeledImage augment(const LabeledImage& item, const AugmentParams& p, std::mt19937_64& rng,
                     std::span<const LabeledImage> pool) {
    if (p.all_zero()) return item;
    std::uniform_real_distribution<double> u01(0.0, 1.0), usym(-1.0, 1.0);
    LabeledImage cur = item;
    auto pick = [&]() -> const LabeledImage& {
        std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
        return pool[d(rng)];
    };
    if (!pool.empty() && p.mosaic > 0 && u01(rng) < p.mosaic) {
        std::array<LabeledImage, 4> four{cur, pick(), pick(), pick()};
        cur = mosaic4(four);
    }
    if (!pool.empty() && p.mixup > 0 && u01(rng) < p.mixup) cur = mixup(cur, pick(), beta_sample(rng, 8.0, 8.0));
    if (p.degrees > 0) cur = rotate(cur, usym(rng) * p.degrees);
    if (p.translate > 0) cur = translate(cur, usym(rng) * p.translate, usym(rng) * p.translate);
    if (p.hsv_h > 0 || p.hsv_s > 0 || p.hsv_v > 0) {
        const double gh = 1 + usym(rng) * p.hsv_h, gs = 1 + usym(rng) * p.hsv_s, gv = 1 + usym(rng) * p.hsv_v;
        hsv_gain(cur.image, gh, gs, gv);
    }
    return cur;
}

// ------------------------------------------------------------- synthetic ---

std::array<std::uint8_t, 3> class_color(int class_id) {
    static const std::array<std::array<std::uint8_t, 3>, 6> colors{{
        {230, 230, 235},
        {215, 120, 50},
        {80, 150, 235},
        {240, 220, 40},
        {200, 60, 200},
        {60, 220, 120},
    }};
    return colors[static_cast<std::size_t>(class_id) % colors.size()];
}

namespace {

std::uint64_t split_salt(std::string_view split) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : split) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    return h;
}

struct Rect {
    int x0, y0, x1, y1;  // inclusive
};

bool overlaps(const Rect& a, const Rect& b, int margin) {
    return !(a.x1 + margin < b.x0 || b.x1 + margin < a.x0 || a.y1 + margin < b.y0 || b.y1 + margin < a.y0);
}

/// Draws a disc stack into img and returns the rasterised extent.
Rect draw_insulator(Image& img, int cls, int x0, int y0, int width, int discs, int disc_h) {
    const auto color = class_color(cls);
    Rect ext{1 << 30, 1 << 30, -1, -1};
    auto put = [&](int x, int y, std::array<std::uint8_t, 3> c) {
        if (x < 0 || y < 0 || x >= static_cast<int>(img.width) || y >= static_cast<int>(img.height)) return;
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), ch) = c[ch];
        ext.x0 = std::min(ext.x0, x), ext.y0 = std::min(ext.y0, y), ext.x1 = std::max(ext.x1, x), ext.y1 = std::max(ext.y1, y);
    };
    const double rx = width / 2.0;
    const double cx = x0 + rx - 0.5;
    const int height = discs * disc_h;
    // Central rod.
    for (int y = y0; y < y0 + height; ++y)
        for (int x = static_cast<int>(std::floor(cx)); x <= static_cast<int>(std::ceil(cx)); ++x) put(x, y, {90, 90, 90});
    const int gap = cls == 1 ? discs / 2 : -1;
    for (int k = 0; k < discs; ++k) {
        if (k == gap) continue;
        const double cy = y0 + k * disc_h + (disc_h - 1) / 2.0;
        const double ry = disc_h / 2.0;
        for (int y = y0 + k * disc_h; y < y0 + (k + 1) * disc_h; ++y)
            for (int x = x0; x < x0 + width; ++x) {
                const double ex = (x - cx) / rx, ey = (y - cy) / ry;
                if (ex * ex + ey * ey <= 1.0) put(x, y, color);
            }
    }
    if (cls == 2) {
        const double bcx = cx, bcy = y0 + height / 2.0 - 0.5, r = std::max(2.0, width / 4.0);
        for (int y = static_cast<int>(bcy - r); y <= static_cast<int>(bcy + r); ++y)
            for (int x = static_cast<int>(bcx - r); x <= static_cast<int>(bcx + r); ++x) {
                if ((x - bcx) * (x - bcx) + (y - bcy) * (y - bcy) <= r * r && x >= ext.x0 && x <= ext.x1 && y >= ext.y0 &&
                    y <= ext.y1)
                    put(x, y, {35, 25, 25});
            }
    }
    return ext;
}

}  // namespace

LabeledImage synthesize_image(const SyntheticSpec& spec, std::string_view split, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(split_salt(split)), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    const int S = static_cast<int>(spec.image_size);
    LabeledImage item;
    item.image = Image(spec.image_size, spec.image_size);

    std::uniform_int_distribution<int> base(-20, 20);
    const int br = 95 + base(rng), bg = 115 + base(rng), bb = 85 + base(rng);
    std::uniform_real_distribution<double> noise(-spec.texture, spec.texture), phase(0, 6.283);
    const double ph = phase(rng);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const double wave = spec.texture > 0 ? 0.5 * spec.texture * std::sin(0.35 * x + 0.2 * y + ph) : 0.0;
            const double n = spec.texture > 0 ? noise(rng) : 0.0;
            item.image.at(x, y, 0) = to_byte(br + wave + n);
            item.image.at(x, y, 1) = to_byte(bg + wave + n);
            item.image.at(x, y, 2) = to_byte(bb + wave + n);
        }

    const int nc = static_cast<int>(spec.names.size());
    std::uniform_int_distribution<std::size_t> count(spec.min_objects, spec.max_objects);
    std::uniform_int_distribution<int> cls_d(0, nc - 1), width_d(9, 16), discs_d(3, 5), disc_h_d(4, 5);
    const std::size_t n_obj = count(rng);
    std::vector<Rect> placed;
    std::vector<int> cells;
    for (std::size_t o = 0; o < n_obj; ++o) {
        const int cls = cls_d(rng), width = width_d(rng), discs = discs_d(rng), disc_h = disc_h_d(rng);
        const int height = discs * disc_h;
        if (width + 2 >= S || height + 2 >= S) continue;
        std::uniform_int_distribution<int> xd(1, S - width - 1), yd(1, S - height - 1);
        for (int attempt = 0; attempt < 100; ++attempt) {
            const int x0 = xd(rng), y0 = yd(rng);
            Rect r{x0, y0, x0 + width - 1, y0 + height - 1};
            const int cell = ((r.y0 + r.y1) / 2 / 8) * (S / 8) + (r.x0 + r.x1) / 2 / 8;
            bool ok = std::find(cells.begin(), cells.end(), cell) == cells.end();
            for (const auto& p : placed) ok = ok && !overlaps(p, r, 2);
            if (!ok) continue;
            const Rect ext = draw_insulator(item.image, cls, x0, y0, width, discs, disc_h);
            placed.push_back(r);
            cells.push_back(cell);
            const double Sd = S;
            item.boxes.push_back({cls, (ext.x0 + ext.x1 + 1) / 2.0 / Sd, (ext.y0 + ext.y1 + 1) / 2.0 / Sd,
                                  (ext.x1 - ext.x0 + 1) / Sd, (ext.y1 - ext.y0 + 1) / Sd});
            break;
        }
    }
    return item;
}

DatasetSpec generate_synthetic(const SyntheticSpec& spec, const fs::path& out) {
    if (spec.image_size < 32 || spec.image_size % 32 != 0) throw Error(Errc::invalid_size, "synthetic image size must be a multiple of 32");
    if (spec.names.empty()) throw Error(Errc::invalid_argument, "synthetic spec needs class names");
    if (spec.min_objects > spec.max_objects) throw Error(Errc::invalid_argument, "min_objects exceeds max_objects");
    DatasetSpec ds;
    ds.names = spec.names;
    ds.image_size = spec.image_size;
    const fs::path root = fs::absolute(out);
    ds.train = root / "images" / "train";
    ds.val = root / "images" / "val";
    ds.test = root / "images" / "test";
    const std::pair<const char*, std::size_t> splits[] = {{"train", spec.train}, {"val", spec.val}, {"test", spec.test}};
    for (const auto& [split, n] : splits) {
        fs::create_directories(root / "images" / split);
        fs::create_directories(root / "labels" / split);
        for (std::size_t i = 0; i < n; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "img_%05zu", i);
            const auto item = synthesize_image(spec, split, i);
            write_ppm(root / "images" / split / (std::string(name) + ".ppm"), item.image);
            write_label_file(root / "labels" / split / (std::string(name) + ".txt"), item.boxes);
        }
    }
    ds.yaml_path = root / "data.yaml";
    write_dataset_yaml(ds.yaml_path, ds);
    return ds;
}

// ------------------------------------------------------------- rendering ---

Image render_annotations(const Image& image, const std::vector<Detection>& detections) {
    Image out = image;
    const long W = static_cast<long>(image.width), H = static_cast<long>(image.height);
    for (const auto& d : detections) {
        const auto color = class_color(d.class_id);
        const long x0 = std::clamp(std::lround((d.box.cx - d.box.w / 2) * W), 0L, W - 1);
        const long x1 = std::clamp(std::lround((d.box.cx + d.box.w / 2) * W) - 1, 0L, W - 1);
        const long y0 = std::clamp(std::lround((d.box.cy - d.box.h / 2) * H), 0L, H - 1);
        const long y1 = std::clamp(std::lround((d.box.cy + d.box.h / 2) * H) - 1, 0L, H - 1);
        auto put = [&](long x, long y, std::array<std::uint8_t, 3> c) {
            for (std::size_t ch = 0; ch < 3; ++ch) out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), ch) = c[ch];
        };
        for (long x = x0; x <= x1; ++x) put(x, y0, color), put(x, y1, color);
        for (long y = y0; y <= y1; ++y) put(x0, y, color), put(x1, y, color);
        std::array<std::uint8_t, 3> marker{};
        for (std::size_t ch = 0; ch < 3; ++ch) marker[ch] = to_byte(color[ch] * std::clamp(d.confidence, 0.0, 1.0));
        for (long y = y0 + 1; y <= std::min(y0 + 2, y1 - 1); ++y)
            for (long x = x0 + 1; x <= std::min(x0 + 2, x1 - 1); ++x) put(x, y, marker);
    }
    return out;
}

void write_annotations(const fs::path& path, const Image& image, const std::vector<Detection>& detections) {
    write_ppm(path, render_annotations(image, detections));
}

Tensor images_to_tensor(std::span<const LabeledImage* const> items) {
    if (items.empty()) throw Error(Errc::empty_dataset, "no images to batch");
    const std::size_t W = items[0]->image.width, H = items[0]->image.height;
    Tensor t({items.size(), 3, H, W});
    for (std::size_t b = 0; b < items.size(); ++b) {
        const Image& img = items[b]->image;
        if (img.width != W || img.height != H) throw Error(Errc::invalid_size, "images in a batch differ in size");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) t.at(b, c, y, x) = img.at(x, y, c) / 255.0;
    }
    return t;
}

std::vector<GroundTruth> to_ground_truth(const std::vector<LabeledBox>& boxes, std::size_t image) {
    std::vector<GroundTruth> out;
    for (const auto& b : boxes) out.push_back({image, b.class_id, {b.cx, b.cy, b.w, b.h}});
    return out;
}

}  // namespace mdf
