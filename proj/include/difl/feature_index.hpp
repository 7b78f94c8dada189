#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "difl/data.hpp"
#include "difl/model_bank.hpp"

namespace difl {

enum class Metric : uint8_t { Cosine = 0, L2 = 1 };

std::string to_string(Metric m);
Metric parse_metric(const std::string& s);

double cosine_distance(std::span<const float> u, std::span<const float> v);
double l2_distance(std::span<const float> u, std::span<const float> v);
double distance(Metric m, std::span<const float> u, std::span<const float> v);

struct PcaSpec {
    enum class Kind { None, Slice, Fixed };
    Kind kind = Kind::None;
    int64_t k = 0;  // Fixed only

    // "none", "slice" or a positive integer.
    static PcaSpec parse(const std::string& text);
    std::string to_string() const;
};

struct PcaModel {
    int64_t dim = 0;  // input dimension
    int64_t k = 0;    // retained components
    bool whitened = false;
    std::vector<float> mean;        // dim
    std::vector<float> components;  // k x dim, row-major

    std::vector<float> project(std::span<const float> x) const;
    friend bool operator==(const PcaModel&, const PcaModel&) = default;
};

// Fits on the rows of `rows` (n x dim). k is clamped to the numerical rank of
// the centered data; `clamped` reports whether that happened.
PcaModel fit_pca(const std::vector<std::vector<float>>& rows, int64_t k, bool whiten = false,
                 bool* clamped = nullptr);

struct Descriptor {
    std::vector<float> values;
    std::string image_id;
    std::string slice;

    friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

struct FeatureIndex {
    Metric metric = Metric::Cosine;
    int64_t latent_dim = 0;
    std::map<std::string, PcaModel> pca;                  // per slice; empty without PCA
    std::map<std::string, std::vector<Descriptor>> slices;  // each sorted by image_id

    size_t size() const;
    const PcaModel* pca_for(const std::string& slice) const;
    friend bool operator==(const FeatureIndex&, const FeatureIndex&) = default;
};

// Groups descriptors by slice, sorts by id, and fits per-slice PCA if requested.
FeatureIndex build_index_from_descriptors(std::vector<Descriptor> descriptors, Metric metric, const PcaSpec& pca,
                                          bool whiten = false);

// Preprocessed inference tensors keyed by record id, loaded on demand.
class ImageStore {
public:
    ImageStore(const DatasetManifest& manifest, int64_t height, int64_t width);
    const ImageTensor& get(const ImageRecord& record);

private:
    const DatasetManifest& manifest_;
    int64_t height_, width_;
    std::map<std::string, ImageTensor> cache_;
};

// Encodes one image with its own domain's encoder and flattens the latent
// channel-major, then row-major within each channel.
std::vector<float> encode_descriptor(const GeneratorBank& bank, const ImageTensor& image, const DomainId& domain);
std::vector<float> encode_record(const GeneratorBank& bank, const ImageRecord& record, ImageStore& store);

FeatureIndex build_index(const GeneratorBank& bank, const DatasetManifest& manifest, Metric metric,
                         const PcaSpec& pca, ImageStore* store = nullptr, bool whiten = false);

struct Match {
    std::string image_id;
    double distance = 0.0;
    friend bool operator==(const Match&, const Match&) = default;
};

// Scans one slice. `query` is already in the index's descriptor space.
std::vector<Match> retrieve_descriptor(const FeatureIndex& index, const std::string& slice,
                                       std::span<const float> query, int64_t top_k);

// Encodes the query with its domain's encoder, applies the slice PCA, then scans.
std::vector<Match> retrieve(const FeatureIndex& index, const GeneratorBank& bank, const ImageRecord& query,
                            int64_t top_k, ImageStore& store);

inline constexpr uint16_t kIndexFormatVersion = 1;

void save_index(const FeatureIndex& index, const std::filesystem::path& path);
FeatureIndex load_index(const std::filesystem::path& path);
std::vector<unsigned char> serialize_index(const FeatureIndex& index);
FeatureIndex deserialize_index(std::span<const unsigned char> bytes);

}  // namespace difl
