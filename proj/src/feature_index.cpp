#include "difl/feature_index.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>

#include <torch/torch.h>

#include "difl/checksum.hpp"
#include "difl/errors.hpp"
#include "difl/trainer.hpp"

namespace difl {

std::string to_string(Metric m) { return m == Metric::Cosine ? "cosine" : "l2"; }

Metric parse_metric(const std::string& s) {
    if (s == "cosine") return Metric::Cosine;
    if (s == "l2" || s == "L2") return Metric::L2;
    throw ConfigError("metric must be cosine or l2, got '" + s + "'");
}

double cosine_distance(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size())
        throw ShapeError("cosine_distance: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double dot = 0, nu = 0, nv = 0;
    for (size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw DegenerateVector("cosine_distance of a zero vector");
    const double c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(1.0 - c, 0.0, 2.0);
}

double l2_distance(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size())
        throw ShapeError("l2_distance: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double s = 0;
    for (size_t i = 0; i < u.size(); ++i) {
        const double d = static_cast<double>(u[i]) - v[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double distance(Metric m, std::span<const float> u, std::span<const float> v) {
    return m == Metric::Cosine ? cosine_distance(u, v) : l2_distance(u, v);
}

PcaSpec PcaSpec::parse(const std::string& text) {
    if (text.empty() || text == "none" || text == "---") return {};
    if (text == "slice") return {Kind::Slice, 0};
    try {
        size_t used = 0;
        const auto k = std::stoll(text, &used);
        if (used == text.size() && k > 0) return {Kind::Fixed, k};
    } catch (const std::exception&) {
    }
    throw ConfigError("PCA spec must be none, slice or a positive integer, got '" + text + "'");
}

std::string PcaSpec::to_string() const {
    switch (kind) {
        case Kind::None: return "none";
        case Kind::Slice: return "slice";
        case Kind::Fixed: return std::to_string(k);
    }
    return "none";
}

std::vector<float> PcaModel::project(std::span<const float> x) const {
    if (static_cast<int64_t>(x.size()) != dim)
        throw ShapeError("PCA input length " + std::to_string(x.size()) + " != " + std::to_string(dim));
    std::vector<double> centered(x.size());
    for (size_t i = 0; i < x.size(); ++i) centered[i] = static_cast<double>(x[i]) - mean[i];
    std::vector<float> out(static_cast<size_t>(k));
    for (int64_t j = 0; j < k; ++j) {
        const float* row = components.data() + j * dim;
        double s = 0;
        for (int64_t i = 0; i < dim; ++i) s += centered[i] * row[i];
        out[j] = static_cast<float>(s);
    }
    return out;
}

PcaModel fit_pca(const std::vector<std::vector<float>>& rows, int64_t k, bool whiten, bool* clamped) {
    if (rows.empty()) throw IndexError("cannot fit PCA on zero rows");
    const int64_t n = static_cast<int64_t>(rows.size());
    const int64_t d = static_cast<int64_t>(rows.front().size());
    auto x = torch::empty({n, d}, torch::kDouble);
    auto acc = x.accessor<double, 2>();
    for (int64_t r = 0; r < n; ++r) {
        if (static_cast<int64_t>(rows[r].size()) != d) throw ShapeError("PCA rows differ in length");
        for (int64_t c = 0; c < d; ++c) acc[r][c] = rows[r][c];
    }
    auto mean = x.mean(0);
    auto centered = x - mean;
    auto [u, s, vh] = torch::linalg_svd(centered, /*full_matrices=*/false);
    const double smax = s.numel() ? s[0].item<double>() : 0.0;
    int64_t rank = 0;
    for (int64_t i = 0; i < s.numel(); ++i)
        if (s[i].item<double>() > smax * 1e-9) ++rank;
    if (clamped) *clamped = k > rank;
    k = std::min(k, rank);
    if (k < 1) throw IndexError("PCA input has rank 0");

    auto comps = vh.slice(0, 0, k).clone();
    for (int64_t j = 0; j < k; ++j) {
        auto row = comps[j];
        const auto idx = row.abs().argmax().item<int64_t>();
        if (row[idx].item<double>() < 0) row.mul_(-1.0);
        if (whiten) row.div_(s[j].item<double>() / std::sqrt(std::max<int64_t>(n - 1, 1)));
    }
    PcaModel m;
    m.dim = d;
    m.k = k;
    m.whitened = whiten;
    auto mean_f = mean.to(torch::kFloat).contiguous();
    auto comps_f = comps.to(torch::kFloat).contiguous();
    m.mean.assign(mean_f.data_ptr<float>(), mean_f.data_ptr<float>() + d);
    m.components.assign(comps_f.data_ptr<float>(), comps_f.data_ptr<float>() + k * d);
    return m;
}

size_t FeatureIndex::size() const {
    size_t n = 0;
    for (const auto& [_, v] : slices) n += v.size();
    return n;
}

const PcaModel* FeatureIndex::pca_for(const std::string& slice) const {
    auto it = pca.find(slice);
    return it == pca.end() ? nullptr : &it->second;
}

FeatureIndex build_index_from_descriptors(std::vector<Descriptor> descriptors, Metric metric, const PcaSpec& pca,
                                          bool whiten) {
    FeatureIndex index;
    index.metric = metric;
    if (descriptors.empty()) throw IndexError("no reference descriptors to index");
    index.latent_dim = static_cast<int64_t>(descriptors.front().values.size());
    for (auto& d : descriptors) {
        if (static_cast<int64_t>(d.values.size()) != index.latent_dim)
            throw ShapeError("descriptor '" + d.image_id + "' has length " + std::to_string(d.values.size()));
        for (float v : d.values)
            if (!std::isfinite(v)) throw IndexError("descriptor '" + d.image_id + "' is not finite");
        index.slices[d.slice].push_back(std::move(d));
    }
    for (auto& [slice, list] : index.slices) {
        std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
        for (size_t i = 1; i < list.size(); ++i)
            if (list[i].image_id == list[i - 1].image_id)
                throw IndexError("duplicate descriptor id '" + list[i].image_id + "'");
        if (pca.kind == PcaSpec::Kind::None) continue;
        const int64_t k = pca.kind == PcaSpec::Kind::Slice ? static_cast<int64_t>(list.size()) : pca.k;
        std::vector<std::vector<float>> rows;
        rows.reserve(list.size());
        for (const auto& d : list) rows.push_back(d.values);
        bool clamped = false;
        auto model = fit_pca(rows, k, whiten, &clamped);
        // "slice" asks for one component per image; the centered rank is at most n - 1.
        if (clamped && pca.kind == PcaSpec::Kind::Fixed)
            std::cerr << "warning: slice '" << slice << "': PCA dimension " << k << " clamped to rank " << model.k
                      << "\n";
        for (auto& d : list) d.values = model.project(d.values);
        index.pca.emplace(slice, std::move(model));
    }
    return index;
}

ImageStore::ImageStore(const DatasetManifest& manifest, int64_t height, int64_t width)
    : manifest_(manifest), height_(height), width_(width) {}

const ImageTensor& ImageStore::get(const ImageRecord& record) {
    auto it = cache_.find(record.id);
    if (it != cache_.end()) return it->second;
    auto t = resize(to_tensor(read_png(manifest_.resolve(record))), height_, width_).contiguous();
    return cache_.emplace(record.id, std::move(t)).first->second;
}

std::vector<float> encode_descriptor(const GeneratorBank& bank, const ImageTensor& image, const DomainId& domain) {
    torch::NoGradGuard no_grad;
    auto feature = encode(bank, domain, image).values;
    auto flat = feature.reshape({-1}).to(torch::kFloat).contiguous();
    return {flat.data_ptr<float>(), flat.data_ptr<float>() + flat.numel()};
}

std::vector<float> encode_record(const GeneratorBank& bank, const ImageRecord& record, ImageStore& store) {
    const auto& domain = bank.domain(record.domain);
    const auto dtype = bank.parameters(domain).front().scalar_type();
    return encode_descriptor(bank, store.get(record).to(dtype), domain);
}

FeatureIndex build_index(const GeneratorBank& bank, const DatasetManifest& manifest, Metric metric,
                         const PcaSpec& pca, ImageStore* store, bool whiten) {
    std::optional<ImageStore> local;
    if (!store) {
        local.emplace(manifest, bank.config().input_height, bank.config().input_width);
        store = &*local;
    }
    std::vector<Descriptor> descriptors;
    std::map<std::string, int> per_slice;
    for (const auto* r : manifest.with_role(Role::Reference)) {
        if (!bank.contains(bank.domain(r->domain)))
            throw KeyNotFound("no encoder for reference domain '" + r->domain + "'");
        descriptors.push_back({encode_record(bank, *r, *store), r->id, r->slice});
        ++per_slice[r->slice];
    }
    for (const auto& s : manifest.slices)
        if (!per_slice.count(s)) throw IndexError("slice '" + s + "' has no reference images");
    return build_index_from_descriptors(std::move(descriptors), metric, pca, whiten);
}

std::vector<Match> retrieve_descriptor(const FeatureIndex& index, const std::string& slice,
                                       std::span<const float> query, int64_t top_k) {
    auto it = index.slices.find(slice);
    if (it == index.slices.end()) throw KeyNotFound("index has no slice '" + slice + "'");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    std::vector<Match> all;
    all.reserve(it->second.size());
    for (const auto& d : it->second) all.push_back({d.image_id, distance(index.metric, query, d.values)});
    const auto k = std::min<size_t>(static_cast<size_t>(top_k), all.size());
    auto less = [](const Match& a, const Match& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.image_id < b.image_id);
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), less);
    all.resize(k);
    return all;
}

std::vector<Match> retrieve(const FeatureIndex& index, const GeneratorBank& bank, const ImageRecord& query,
                            int64_t top_k, ImageStore& store) {
    if (!index.slices.count(query.slice)) throw KeyNotFound("index has no slice '" + query.slice + "'");
    auto q = encode_record(bank, query, store);
    if (const auto* pca = index.pca_for(query.slice)) q = pca->project(q);
    return retrieve_descriptor(index, query.slice, q, top_k);
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kMagic[4] = {'D', 'I', 'F', 'X'};

class Writer {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
        bytes.insert(bytes.end(), b, b + sizeof(T));
    }
    void put_string(const std::string& s) {
        if (s.size() > std::numeric_limits<uint16_t>::max()) throw FormatError("string too long for index: " + s);
        put(static_cast<uint16_t>(s.size()));
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    void put_floats(const std::vector<float>& v) {
        for (float f : v) put(f);
    }
    std::vector<unsigned char> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const unsigned char> b) : bytes_(b) {}
    template <typename T>
    T get() {
        need(sizeof(T));
        unsigned char b[sizeof(T)];
        std::memcpy(b, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
        pos_ += sizeof(T);
        T v;
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
    std::string get_string() {
        const auto n = get<uint16_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<float> get_floats(uint64_t n) {
        need(n * sizeof(float));
        std::vector<float> v(n);
        for (auto& f : v) f = get<float>();
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(uint64_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("index file truncated");
    }
    std::span<const unsigned char> bytes_;
    size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_index(const FeatureIndex& index) {
    Writer w;
    w.bytes.insert(w.bytes.end(), kMagic, kMagic + 4);
    w.put(kIndexFormatVersion);
    w.put(static_cast<uint8_t>(index.metric));
    w.put(static_cast<uint32_t>(index.latent_dim));
    w.put(static_cast<uint32_t>(index.size()));
    w.put(static_cast<uint8_t>(index.pca.empty() ? 0 : 1));
    if (!index.pca.empty()) {
        w.put(static_cast<uint32_t>(index.pca.size()));
        for (const auto& [slice, m] : index.pca) {
            w.put_string(slice);
            w.put(static_cast<uint32_t>(m.k));
            w.put(static_cast<uint8_t>(m.whitened ? 1 : 0));
            w.put_floats(m.mean);
            w.put_floats(m.components);
        }
    }
    std::vector<const Descriptor*> all;
    for (const auto& [_, list] : index.slices)
        for (const auto& d : list) all.push_back(&d);
    std::sort(all.begin(), all.end(), [](const auto* a, const auto* b) { return a->image_id < b->image_id; });
    for (const auto* d : all) {
        w.put_string(d->image_id);
        w.put_string(d->slice);
        w.put_floats(d->values);
    }
    w.put(crc32(std::span<const unsigned char>(w.bytes)));
    return std::move(w.bytes);
}

FeatureIndex deserialize_index(std::span<const unsigned char> bytes) {
    if (bytes.size() < 4 + 2 + 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("not a feature index (bad magic)");
    Reader header(bytes.subspan(4));
    const auto version = header.get<uint16_t>();
    if (version != kIndexFormatVersion)
        throw FormatError("unsupported index format version " + std::to_string(version) + " (expected " +
                          std::to_string(kIndexFormatVersion) + ")");
    const auto payload = bytes.first(bytes.size() - 4);
    Reader tail(bytes.last(4));
    if (crc32(payload) != tail.get<uint32_t>()) throw FormatError("index checksum mismatch");

    Reader r(payload.subspan(6));
    FeatureIndex index;
    const auto metric = r.get<uint8_t>();
    if (metric > 1) throw FormatError("unknown metric byte " + std::to_string(metric));
    index.metric = static_cast<Metric>(metric);
    index.latent_dim = r.get<uint32_t>();
    const auto count = r.get<uint32_t>();
    const auto has_pca = r.get<uint8_t>();
    if (has_pca > 1) throw FormatError("bad PCA flag");
    if (has_pca) {
        const auto models = r.get<uint32_t>();
        for (uint32_t i = 0; i < models; ++i) {
            PcaModel m;
            const auto slice = r.get_string();
            m.dim = index.latent_dim;
            m.k = r.get<uint32_t>();
            m.whitened = r.get<uint8_t>() != 0;
            m.mean = r.get_floats(static_cast<uint64_t>(m.dim));
            m.components = r.get_floats(static_cast<uint64_t>(m.k) * m.dim);
            index.pca.emplace(slice, std::move(m));
        }
    }
    for (uint32_t i = 0; i < count; ++i) {
        Descriptor d;
        d.image_id = r.get_string();
        d.slice = r.get_string();
        const auto* pca = index.pca_for(d.slice);
        if (has_pca && !pca) throw FormatError("record '" + d.image_id + "' has a slice without a PCA model");
        d.values = r.get_floats(static_cast<uint64_t>(pca ? pca->k : index.latent_dim));
        index.slices[d.slice].push_back(std::move(d));
    }
    if (!r.done()) throw FormatError("trailing bytes in index file");
    for (auto& [_, list] : index.slices)
        std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    return index;
}

void save_index(const FeatureIndex& index, const std::filesystem::path& path) {
    const auto bytes = serialize_index(index);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write index " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing index " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

FeatureIndex load_index(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open index " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_index(bytes);
}

}  // namespace difl
