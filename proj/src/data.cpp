#include "difl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <png.h>

#include "difl/errors.hpp"

namespace difl {

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion Quaternion::normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
}

Quaternion operator*(const Quaternion& a, const Quaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z, a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x, a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quaternion Quaternion::from_axis_angle(std::array<double, 3> axis, double radians) {
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    const double s = std::sin(radians / 2) / n;
    return {std::cos(radians / 2), axis[0] * s, axis[1] * s, axis[2] * s};
}

bool Pose::valid() const {
    for (double v : position)
        if (!std::isfinite(v)) return false;
    return std::abs(orientation.norm() - 1.0) <= 1e-6;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

const char* kHeader = "id,path,domain,slice,role,x,y,z,qw,qx,qy,qz";

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream in(line);
    while (std::getline(in, cell, sep)) out.push_back(cell);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
    return out;
}

std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_real(const std::string& s, int line_no) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ManifestError("line " + std::to_string(line_no) + ": bad number '" + s + "'");
}

}  // namespace

std::filesystem::path DatasetManifest::resolve(const ImageRecord& r) const {
    std::filesystem::path p(r.path);
    return p.is_absolute() ? p : base_dir / p;
}

const ImageRecord& DatasetManifest::find(const std::string& id) const {
    auto it = std::lower_bound(records.begin(), records.end(), id,
                               [](const ImageRecord& r, const std::string& key) { return r.id < key; });
    if (it == records.end() || it->id != id) throw KeyNotFound("no record with id '" + id + "'");
    return *it;
}

std::vector<const ImageRecord*> DatasetManifest::with_role(Role role) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.role == role) out.push_back(&r);
    return out;
}

void DatasetManifest::validate() const {
    std::set<std::string> dom(domains.begin(), domains.end());
    std::set<std::string> sl(slices.begin(), slices.end());
    if (dom.size() != domains.size()) throw ManifestError("duplicate domain names");
    std::set<std::string> ids;
    for (const auto& r : records) {
        if (r.id.empty()) throw ManifestError("record with empty id");
        if (!ids.insert(r.id).second) throw ManifestError("duplicate id '" + r.id + "'");
        if (!dom.count(r.domain)) throw ManifestError("record '" + r.id + "' has unlisted domain '" + r.domain + "'");
        if (!sl.count(r.slice)) throw ManifestError("record '" + r.id + "' has unlisted slice '" + r.slice + "'");
        if (r.role == Role::Reference && !r.pose) throw ManifestError("reference record '" + r.id + "' has no pose");
        if (r.pose && !r.pose->valid()) throw ManifestError("record '" + r.id + "' has an invalid pose");
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    int line_no = 0;
    bool seen_header = false;
    std::vector<std::string> seen_domains, seen_slices;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("#domains=", 0) == 0) {
            m.domains = split(line.substr(9), ',');
            continue;
        }
        if (line.rfind("#slices=", 0) == 0) {
            m.slices = split(line.substr(8), ',');
            continue;
        }
        if (line[0] == '#') continue;
        if (!seen_header) {
            if (line != kHeader) throw ManifestError("unexpected manifest header: " + line);
            seen_header = true;
            continue;
        }
        auto cells = split(line, ',');
        if (cells.size() != 5 && cells.size() != 12)
            throw ManifestError("line " + std::to_string(line_no) + ": expected 5 or 12 columns, got " +
                                std::to_string(cells.size()));
        ImageRecord r;
        r.id = cells[0];
        r.path = cells[1];
        r.domain = cells[2];
        r.slice = cells[3];
        if (cells[4] == "reference")
            r.role = Role::Reference;
        else if (cells[4] == "query")
            r.role = Role::Query;
        else
            throw ManifestError("line " + std::to_string(line_no) + ": role must be reference or query");
        if (cells.size() == 12) {
            const auto filled = std::count_if(cells.begin() + 5, cells.end(), [](const auto& c) { return !c.empty(); });
            if (filled != 0 && filled != 7)
                throw ManifestError("line " + std::to_string(line_no) + ": partial pose columns");
            if (filled == 7) {
                Pose p;
                for (int i = 0; i < 3; ++i) p.position[i] = parse_real(cells[5 + i], line_no);
                p.orientation = {parse_real(cells[8], line_no), parse_real(cells[9], line_no),
                                 parse_real(cells[10], line_no), parse_real(cells[11], line_no)};
                r.pose = p;
            }
        }
        if (std::find(seen_domains.begin(), seen_domains.end(), r.domain) == seen_domains.end())
            seen_domains.push_back(r.domain);
        if (std::find(seen_slices.begin(), seen_slices.end(), r.slice) == seen_slices.end())
            seen_slices.push_back(r.slice);
        m.records.push_back(std::move(r));
    }
    if (!seen_header) throw ManifestError("manifest " + path.string() + " has no header row");
    if (m.domains.empty()) {
        m.domains = seen_domains;
        std::sort(m.domains.begin(), m.domains.end());
    }
    if (m.slices.empty()) {
        m.slices = seen_slices;
        std::sort(m.slices.begin(), m.slices.end());
    }
    std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    manifest.validate();
    for (const auto& r : manifest.records)
        for (const auto* field : {&r.id, &r.path, &r.domain, &r.slice})
            if (field->find(',') != std::string::npos || field->find('\n') != std::string::npos)
                throw ManifestError("field '" + *field + "' contains a delimiter");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << "#domains=" << join(manifest.domains) << "\n";
    out << "#slices=" << join(manifest.slices) << "\n";
    out << kHeader << "\n";
    auto records = manifest.records;
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (const auto& r : records) {
        out << r.id << ',' << r.path << ',' << r.domain << ',' << r.slice << ','
            << (r.role == Role::Reference ? "reference" : "query");
        if (r.pose) {
            const auto& p = *r.pose;
            for (double v : {p.position[0], p.position[1], p.position[2], p.orientation.w, p.orientation.x,
                             p.orientation.y, p.orientation.z})
                out << ',' << format_real(v);
        } else {
            out << ",,,,,,,";
        }
        out << "\n";
    }
    if (!out) throw IoError("failed writing manifest " + path.string());
}

// ---------------------------------------------------------------------------
// PNG

RawImage read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw IoError("cannot read image " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    RawImage out;
    out.width = static_cast<int>(img.width);
    out.height = static_cast<int>(img.height);
    out.rgb.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw IoError("cannot decode image " + path.string() + ": " + msg);
    }
    return out;
}

void write_png(const RawImage& image, const std::filesystem::path& path) {
    if (image.rgb.size() != static_cast<size_t>(image.width) * image.height * 3)
        throw IoError("image buffer size does not match dimensions");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.rgb.data(), 0, nullptr))
        throw IoError("cannot write image " + path.string() + ": " + img.message);
}

// ---------------------------------------------------------------------------
// Toy dataset

void ToySceneSpec::validate() const {
    if (n_places < 2) throw ConfigError("toy dataset needs n_places >= 2");
    if (n_domains < 2) throw ConfigError("toy dataset needs n_domains >= 2");
    if (image_size < 8) throw ConfigError("toy image_size must be >= 8");
    if (n_slices < 1 || n_slices > n_places) throw ConfigError("toy n_slices must be in [1, n_places]");
    if (pose_jitter_m < 0 || pose_jitter_deg < 0) throw ConfigError("pose jitter must be non-negative");
    if (!style_params.empty() && static_cast<int>(style_params.size()) != n_domains)
        throw ConfigError("style_params must have one entry per domain");
}

namespace {

using Rgb = std::array<double, 3>;

std::mt19937_64 stream_rng(uint64_t seed, uint64_t a, uint64_t b = 0) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(a),
                      static_cast<uint32_t>(a >> 32), static_cast<uint32_t>(b), static_cast<uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
}

Rgb apply_color(const DomainStyle& s, const Rgb& c) {
    Rgb out{};
    for (int i = 0; i < 3; ++i) {
        double v = s.bias[i];
        for (int j = 0; j < 3; ++j) v += s.color_matrix[i * 3 + j] * c[j];
        out[i] = std::pow(std::clamp(v, 0.0, 1.0), s.gamma);
    }
    return out;
}

Rgb palette_mean(const DomainStyle& s) {
    Rgb sum{0, 0, 0};
    int n = 0;
    for (double r : {0.2, 0.5, 0.8})
        for (double g : {0.2, 0.5, 0.8})
            for (double b : {0.2, 0.5, 0.8}) {
                auto c = apply_color(s, {r, g, b});
                for (int i = 0; i < 3; ++i) sum[i] += c[i];
                ++n;
            }
    for (auto& v : sum) v /= n;
    return sum;
}

double linf(const Rgb& a, const Rgb& b) {
    double m = 0;
    for (int i = 0; i < 3; ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

enum class Shape { Circle, Rectangle, Stripe };

struct Primitive {
    Shape shape;
    double cx, cy, a, b, angle;
    Rgb color;
};

struct Scene {
    Rgb background;
    Rgb gradient;
    std::vector<Primitive> prims;
};

Scene draw_scene(uint64_t seed, int place) {
    auto rng = stream_rng(seed, 0x5CE4E, static_cast<uint64_t>(place));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    Scene s;
    for (auto& c : s.background) c = uni(0.2, 0.8);
    for (auto& g : s.gradient) g = uni(-0.2, 0.2);
    const int k = 6 + static_cast<int>(u01(rng) * 4);
    for (int i = 0; i < k; ++i) {
        Primitive p{};
        const double pick = u01(rng);
        p.shape = pick < 0.4 ? Shape::Circle : (pick < 0.8 ? Shape::Rectangle : Shape::Stripe);
        p.cx = uni(-36, 36);
        p.cy = uni(-36, 36);
        p.a = p.shape == Shape::Stripe ? uni(2, 5) : uni(5, 14);
        p.b = uni(4, 14);
        p.angle = uni(0, std::numbers::pi);
        for (auto& c : p.color) c = uni(0.0, 1.0);
        s.prims.push_back(p);
    }
    return s;
}

Rgb shade(const Scene& s, double x, double y) {
    Rgb c;
    for (int i = 0; i < 3; ++i) c[i] = std::clamp(s.background[i] + s.gradient[i] * (x + y) / 64.0, 0.0, 1.0);
    for (const auto& p : s.prims) {
        const double dx = x - p.cx, dy = y - p.cy;
        const double ca = std::cos(p.angle), sa = std::sin(p.angle);
        const double lx = ca * dx + sa * dy, ly = -sa * dx + ca * dy;
        bool inside = false;
        switch (p.shape) {
            case Shape::Circle: inside = dx * dx + dy * dy <= p.a * p.a; break;
            case Shape::Rectangle: inside = std::abs(lx) <= p.a && std::abs(ly) <= p.b; break;
            case Shape::Stripe: inside = std::abs(ly) <= p.a; break;
        }
        if (inside) c = p.color;
    }
    return c;
}

// Small camera displacement expressed in the reference camera frame.
struct ViewOffset {
    Vec3 translation{0, 0, 0};  // meters
    Vec3 rotation{0, 0, 0};     // axis * angle, radians
};

RawImage render(const Scene& scene, const DomainStyle& style, const ViewOffset& view, const ToySceneSpec& spec,
                std::mt19937_64& rng) {
    const int n = spec.image_size;
    const double unit = 64.0 / n;  // world units per pixel at the reference view
    const double focal = 180.0 / std::numbers::pi;  // one pixel per degree of pitch/yaw
    const double shift_x = view.translation[0] * spec.pixels_per_meter + view.rotation[1] * focal;
    const double shift_y = view.translation[1] * spec.pixels_per_meter + view.rotation[0] * focal;
    const double scale = 1.0 / (1.0 + 0.05 * view.translation[2]);
    const double roll = view.rotation[2];
    const double cr = std::cos(roll), sr = std::sin(roll);

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double phase = u01(rng) * 2 * std::numbers::pi;
    const double gx = std::cos(style.overlay_angle), gy = std::sin(style.overlay_angle);

    RawImage img{n, n, std::vector<uint8_t>(static_cast<size_t>(n) * n * 3)};
    constexpr int kSuper = 3;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            Rgb acc{0, 0, 0};
            for (int si = 0; si < kSuper; ++si)
                for (int sj = 0; sj < kSuper; ++sj) {
                    const double u = (j + (sj + 0.5) / kSuper - n / 2.0) * unit * scale;
                    const double v = (i + (si + 0.5) / kSuper - n / 2.0) * unit * scale;
                    const double x = cr * u - sr * v + shift_x * unit;
                    const double y = sr * u + cr * v + shift_y * unit;
                    auto c = shade(scene, x, y);
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            for (auto& v : acc) v /= kSuper * kSuper;
            auto c = apply_color(style, acc);
            const double grating =
                style.overlay_amplitude *
                std::sin(2 * std::numbers::pi * style.overlay_frequency * (gx * j + gy * i) + phase);
            for (int k = 0; k < 3; ++k) {
                double v = c[k] + grating + style.noise_sigma * noise(rng);
                img.rgb[(static_cast<size_t>(i) * n + j) * 3 + k] =
                    static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    }
    return img;
}

}  // namespace

std::vector<DomainStyle> draw_domain_styles(const ToySceneSpec& spec) {
    spec.validate();
    if (!spec.style_params.empty()) return spec.style_params;
    auto rng = stream_rng(spec.seed, 0x57E1E);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

    std::vector<DomainStyle> styles;
    DomainStyle reference;
    reference.noise_sigma = 0.01;
    styles.push_back(reference);
    std::vector<Rgb> means{palette_mean(reference)};

    for (int d = 1; d < spec.n_domains; ++d) {
        for (int attempt = 0;; ++attempt) {
            DomainStyle s;
            std::array<int, 3> perm{0, 1, 2};
            do {
                std::shuffle(perm.begin(), perm.end(), rng);
            } while (perm == std::array<int, 3>{0, 1, 2});
            const double mix = uni(0.5, 0.9);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    s.color_matrix[i * 3 + j] =
                        (1 - mix) * (i == j ? 1.0 : 0.0) + mix * (perm[i] == j ? 1.0 : 0.0) + uni(-0.1, 0.1);
            for (auto& b : s.bias) b = uni(-0.15, 0.15);
            s.gamma = std::exp(uni(-0.5, 0.5));
            s.overlay_amplitude = uni(0.04, 0.1);
            s.overlay_frequency = uni(0.08, 0.25);
            s.overlay_angle = uni(0, std::numbers::pi);
            s.noise_sigma = 0.02;
            const auto m = palette_mean(s);
            bool ok = true;
            for (const auto& other : means) ok = ok && linf(m, other) >= spec.min_mean_margin;
            if (ok || attempt > 1000) {
                styles.push_back(s);
                means.push_back(m);
                break;
            }
        }
    }
    return styles;
}

std::string toy_domain_name(int index) { return "dom" + std::to_string(index); }

std::string toy_record_id(int place, int domain_index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "p%04d_d%d", place, domain_index);
    return buf;
}

std::optional<int> toy_place_index(const std::string& id) {
    if (id.size() < 6 || id[0] != 'p' || id[5] != '_') return std::nullopt;
    try {
        return std::stoi(id.substr(1, 4));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

DatasetManifest generate_toy_dataset(const ToySceneSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    const auto styles = draw_domain_styles(spec);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

    DatasetManifest m;
    m.base_dir = out_dir;
    for (int d = 1; d <= spec.n_domains; ++d) m.domains.push_back(toy_domain_name(d));
    for (int s = 0; s < spec.n_slices; ++s) m.slices.push_back("slice" + std::to_string(s));

    const double jitter_rad = spec.pose_jitter_deg * std::numbers::pi / 180.0;
    for (int p = 0; p < spec.n_places; ++p) {
        const auto scene = draw_scene(spec.seed, p);
        auto pose_rng = stream_rng(spec.seed, 0x9051E, static_cast<uint64_t>(p));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);

        Pose ref;
        ref.position = {spec.place_spacing_m * p, 0.0, 1.5};
        ref.orientation = Quaternion::from_axis_angle({0, 0, 1}, (u01(pose_rng) * 2 - 1) * std::numbers::pi);
        const std::string slice = m.slices[static_cast<size_t>(p) * spec.n_slices / spec.n_places];

        for (int d = 1; d <= spec.n_domains; ++d) {
            ViewOffset view;
            Pose pose = ref;
            if (d > 1) {
                auto random_unit = [&] {
                    Vec3 v;
                    double n = 0;
                    do {
                        for (auto& c : v) c = gauss(pose_rng);
                        n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
                    } while (n < 1e-9);
                    for (auto& c : v) c /= n;
                    return v;
                };
                const auto dir = random_unit();
                const double radius = spec.pose_jitter_m * std::cbrt(u01(pose_rng));
                const auto axis = random_unit();
                const double angle = jitter_rad * u01(pose_rng);
                for (int i = 0; i < 3; ++i) {
                    view.translation[i] = dir[i] * radius;
                    view.rotation[i] = axis[i] * angle;
                }
                // Offset is in the reference camera frame: rotate it into the world frame.
                const Quaternion offset{0, view.translation[0], view.translation[1], view.translation[2]};
                const auto world = ref.orientation * offset * ref.orientation.conjugate();
                pose.position = {ref.position[0] + world.x, ref.position[1] + world.y, ref.position[2] + world.z};
                pose.orientation = (ref.orientation * Quaternion::from_axis_angle(axis, angle)).normalized();
                if (angle == 0.0) pose.orientation = ref.orientation;
            }
            auto pixel_rng = stream_rng(spec.seed, 0x1A6E, static_cast<uint64_t>(p) * 1024 + d);
            const auto image = render(scene, styles[d - 1], view, spec, pixel_rng);
            const auto id = toy_record_id(p, d);
            const auto rel = std::filesystem::path("images") / (id + ".png");
            write_png(image, out_dir / rel);
            m.records.push_back({id, rel.string(), toy_domain_name(d), slice,
                                 d == 1 ? Role::Reference : Role::Query, pose});
        }
    }
    std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    save_manifest(m, out_dir / "manifest.csv");
    return m;
}

}  // namespace difl
