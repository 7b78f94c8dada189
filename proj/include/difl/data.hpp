#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace difl {

struct Quaternion {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    double norm() const;
    Quaternion normalized() const;
    Quaternion conjugate() const { return {w, -x, -y, -z}; }
    friend Quaternion operator*(const Quaternion& a, const Quaternion& b);
    friend bool operator==(const Quaternion&, const Quaternion&) = default;

    static Quaternion from_axis_angle(std::array<double, 3> axis, double radians);
};

using Vec3 = std::array<double, 3>;

struct Pose {
    Vec3 position{0.0, 0.0, 0.0};  // meters
    Quaternion orientation;        // unit (w, x, y, z)

    bool valid() const;
    friend bool operator==(const Pose&, const Pose&) = default;
};

enum class Role { Reference, Query };

struct ImageRecord {
    std::string id;
    std::string path;    // as written in the manifest; resolve with DatasetManifest::resolve
    std::string domain;  // domain name
    std::string slice;
    Role role = Role::Reference;
    std::optional<Pose> pose;

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
    std::vector<ImageRecord> records;  // sorted by id
    std::vector<std::string> domains;  // index order; the first is domain 1
    std::vector<std::string> slices;
    std::filesystem::path base_dir;    // directory relative paths resolve against

    std::filesystem::path resolve(const ImageRecord& r) const;
    const ImageRecord& find(const std::string& id) const;
    std::vector<const ImageRecord*> with_role(Role role) const;
    void validate() const;

    friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
        return a.records == b.records && a.domains == b.domains && a.slices == b.slices;
    }
};

// Delimited text:
//   #domains=<name>,<name>,...
//   #slices=<name>,...
//   id,path,domain,slice,role,x,y,z,qw,qx,qy,qz
//   <one row per record; pose columns empty when absent>
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// 8-bit RGB, row-major, interleaved.
struct RawImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;

    friend bool operator==(const RawImage&, const RawImage&) = default;
};

RawImage read_png(const std::filesystem::path& path);
void write_png(const RawImage& image, const std::filesystem::path& path);

struct DomainStyle {
    std::array<double, 9> color_matrix{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, applied to RGB in [0,1]
    std::array<double, 3> bias{0, 0, 0};
    double gamma = 1.0;
    double overlay_amplitude = 0.0;   // grating added after the color transform
    double overlay_frequency = 0.0;   // cycles per pixel
    double overlay_angle = 0.0;       // radians
    double noise_sigma = 0.0;         // per-pixel gaussian noise, [0,1] units
};

struct ToySceneSpec {
    int n_places = 50;
    int n_domains = 3;
    int image_size = 64;
    int n_slices = 1;
    std::vector<DomainStyle> style_params;  // empty: drawn from the seed (domain 1 is identity)
    double pose_jitter_m = 0.2;
    double pose_jitter_deg = 1.0;
    double place_spacing_m = 8.0;
    double pixels_per_meter = 5.0;
    double min_mean_margin = 0.05;          // per-domain channel means differ at least this much
    uint64_t seed = 1;

    void validate() const;
};

std::vector<DomainStyle> draw_domain_styles(const ToySceneSpec& spec);
std::string toy_domain_name(int index);
std::string toy_record_id(int place, int domain_index);
// Place index encoded in a toy record id, if it is one.
std::optional<int> toy_place_index(const std::string& id);

// Writes images/<id>.png and manifest.csv under out_dir and returns the manifest.
DatasetManifest generate_toy_dataset(const ToySceneSpec& spec, const std::filesystem::path& out_dir);

}  // namespace difl
