#pragma once

// Synthetic multimodal data with generator-known easy/hard structure.
//
// Every dataset fixes an orthonormal projection P_m (dims_m x q) per
// modality and a label code c(y) in R^q. Easy samples put s*c(y) on
// modality 1 and only a weak echo on the others. Hard samples split the
// code across modalities 1 and 2: modality 1 carries s*r with r random,
// modality 2 carries s*(2c(y) - r), so modality 1 alone is independent
// of the label while the sum of both projections is 2s*c(y).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynmm/nn.hpp"

namespace dynmm {

enum class TaskKind { binary_class, multiclass, regression };
enum class Difficulty : std::uint8_t { easy = 0, hard = 1 };

inline const char* to_string(TaskKind t) {
    switch (t) {
        case TaskKind::binary_class: return "binary_class";
        case TaskKind::multiclass: return "multiclass";
        case TaskKind::regression: return "regression";
    }
    return "?";
}

inline TaskKind task_from_string(const std::string& s) {
    if (s == "binary_class") return TaskKind::binary_class;
    if (s == "multiclass") return TaskKind::multiclass;
    if (s == "regression") return TaskKind::regression;
    throw std::invalid_argument("unknown task kind '" + s + "'");
}

struct Sample {
    std::vector<std::vector<double>> features;  // one vector per modality
    double label = 0.0;                         // class index or regression target
    Difficulty difficulty = Difficulty::easy;   // generator ground truth, never a model input

    std::size_t class_index() const { return static_cast<std::size_t>(label); }
    bool operator==(const Sample&) const = default;
};

struct Dataset {
    TaskKind task = TaskKind::binary_class;
    std::size_t num_classes = 2;
    std::vector<std::size_t> dims;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    std::size_t num_modalities() const { return dims.size(); }
    std::size_t num_outputs() const { return task == TaskKind::regression ? 1 : num_classes; }

    bool operator==(const Dataset&) const = default;
};

struct SyntheticSpec {
    std::vector<std::size_t> dims{32, 32};
    std::size_t n_train = 4000;
    std::size_t n_test = 2000;
    double p_hard = 0.2;
    TaskKind task = TaskKind::binary_class;
    std::size_t num_classes = 2;
    double signal_scale = 3.0;
    double noise_scale = 1.0;
    double weak_signal = 0.2;  // fraction of the code echoed on non-primary modalities of easy samples
    std::uint64_t seed = 0;

    std::size_t modalities() const { return dims.size(); }
    bool operator==(const SyntheticSpec&) const = default;
};

struct DatasetSplit {
    SyntheticSpec spec;
    Dataset train;
    Dataset test;
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"modalities", s.dims.size()}, {"dims", s.dims},     {"n_train", s.n_train},
                       {"n_test", s.n_test},          {"p_hard", s.p_hard}, {"task", to_string(s.task)},
                       {"num_classes", s.num_classes}, {"signal_scale", s.signal_scale},
                       {"noise_scale", s.noise_scale}, {"weak_signal", s.weak_signal}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.dims = j.value("dims", d.dims);
    if (j.contains("modalities") && j.at("modalities").get<std::size_t>() != s.dims.size()) {
        throw std::invalid_argument("synthetic spec: 'modalities' does not match length of 'dims'");
    }
    s.n_train = j.value("n_train", d.n_train);
    s.n_test = j.value("n_test", d.n_test);
    s.p_hard = j.value("p_hard", d.p_hard);
    s.task = task_from_string(j.value("task", std::string(to_string(d.task))));
    s.num_classes = j.value("num_classes", s.task == TaskKind::binary_class ? std::size_t{2} : d.num_classes);
    s.signal_scale = j.value("signal_scale", d.signal_scale);
    s.noise_scale = j.value("noise_scale", d.noise_scale);
    s.weak_signal = j.value("weak_signal", d.weak_signal);
    s.seed = j.value("seed", d.seed);
}

inline void validate(const SyntheticSpec& spec) {
    if (spec.dims.size() < 2) throw std::invalid_argument("synthetic spec: need at least two modalities");
    if (spec.p_hard < 0.0 || spec.p_hard > 1.0) throw std::invalid_argument("synthetic spec: p_hard must be in [0,1]");
    if (spec.noise_scale < 0.0) throw std::invalid_argument("synthetic spec: noise_scale must be non-negative");
    if (spec.task == TaskKind::binary_class && spec.num_classes != 2) {
        throw std::invalid_argument("synthetic spec: binary task needs num_classes = 2");
    }
    if (spec.task == TaskKind::multiclass && spec.num_classes < 2) {
        throw std::invalid_argument("synthetic spec: multiclass task needs num_classes >= 2");
    }
    const std::size_t q = spec.task == TaskKind::multiclass ? spec.num_classes : 1;
    for (auto d : spec.dims) {
        if (d < q) throw std::invalid_argument("synthetic spec: every modality dim must be >= code size");
    }
}

namespace detail {

// dims x q matrix (row-major) with orthonormal columns.
inline std::vector<double> random_orthonormal(std::size_t dims, std::size_t q, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> cols(q * dims);
    for (std::size_t c = 0; c < q; ++c) {
        double* v = cols.data() + c * dims;
        for (;;) {
            for (std::size_t i = 0; i < dims; ++i) v[i] = normal(rng);
            for (std::size_t p = 0; p < c; ++p) {
                const double* u = cols.data() + p * dims;
                double dot = 0.0;
                for (std::size_t i = 0; i < dims; ++i) dot += v[i] * u[i];
                for (std::size_t i = 0; i < dims; ++i) v[i] -= dot * u[i];
            }
            double norm = 0.0;
            for (std::size_t i = 0; i < dims; ++i) norm += v[i] * v[i];
            norm = std::sqrt(norm);
            if (norm > 1e-6) {
                for (std::size_t i = 0; i < dims; ++i) v[i] /= norm;
                break;
            }
        }
    }
    std::vector<double> out(dims * q);
    for (std::size_t i = 0; i < dims; ++i) {
        for (std::size_t c = 0; c < q; ++c) out[i * q + c] = cols[c * dims + i];
    }
    return out;
}

struct Generator {
    const SyntheticSpec& spec;
    std::size_t q;
    std::vector<std::vector<double>> projections;
    Rng rng;

    explicit Generator(const SyntheticSpec& s) : spec(s), q(s.task == TaskKind::multiclass ? s.num_classes : 1), rng(s.seed) {
        for (auto d : spec.dims) projections.push_back(random_orthonormal(d, q, rng));
    }

    std::vector<double> embed(std::size_t m, const std::vector<double>& code, double scale) {
        std::normal_distribution<double> normal(0.0, 1.0);
        const std::size_t d = spec.dims[m];
        std::vector<double> f(d);
        for (std::size_t i = 0; i < d; ++i) {
            double v = 0.0;
            for (std::size_t c = 0; c < q; ++c) v += projections[m][i * q + c] * code[c];
            f[i] = scale * v + spec.noise_scale * normal(rng);
        }
        return f;
    }

    Sample draw() {
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        Sample s;
        std::vector<double> code(q);
        switch (spec.task) {
            case TaskKind::binary_class: {
                const bool positive = unit(rng) < 0.5;
                s.label = positive ? 1.0 : 0.0;
                code[0] = positive ? 1.0 : -1.0;
                break;
            }
            case TaskKind::multiclass: {
                std::uniform_int_distribution<std::size_t> cls(0, spec.num_classes - 1);
                const auto y = cls(rng);
                s.label = static_cast<double>(y);
                for (std::size_t c = 0; c < q; ++c) code[c] = c == y ? 1.0 : -1.0;
                break;
            }
            case TaskKind::regression: {
                const double t = normal(rng);
                s.label = t;
                code[0] = t;
                break;
            }
        }
        s.difficulty = unit(rng) < spec.p_hard ? Difficulty::hard : Difficulty::easy;
        const double sc = spec.signal_scale;
        s.features.resize(spec.dims.size());
        if (s.difficulty == Difficulty::easy) {
            s.features[0] = embed(0, code, sc);
            for (std::size_t m = 1; m < spec.dims.size(); ++m) s.features[m] = embed(m, code, sc * spec.weak_signal);
        } else {
            std::vector<double> r(q), rest(q);
            for (std::size_t c = 0; c < q; ++c) {
                r[c] = normal(rng);
                rest[c] = 2.0 * code[c] - r[c];
            }
            s.features[0] = embed(0, r, sc);
            s.features[1] = embed(1, rest, sc);
            for (std::size_t m = 2; m < spec.dims.size(); ++m) s.features[m] = embed(m, code, sc * spec.weak_signal);
        }
        return s;
    }
};

}  // namespace detail

inline Dataset empty_like(const SyntheticSpec& spec) {
    Dataset d;
    d.task = spec.task;
    d.num_classes = spec.task == TaskKind::regression ? 0 : spec.num_classes;
    d.dims = spec.dims;
    return d;
}

inline DatasetSplit generate(const SyntheticSpec& spec) {
    validate(spec);
    detail::Generator gen(spec);
    DatasetSplit out{spec, empty_like(spec), empty_like(spec)};
    out.train.samples.reserve(spec.n_train);
    out.test.samples.reserve(spec.n_test);
    for (std::size_t i = 0; i < spec.n_train; ++i) out.train.samples.push_back(gen.draw());
    for (std::size_t i = 0; i < spec.n_test; ++i) out.test.samples.push_back(gen.draw());
    return out;
}

// --- noise injection ---

enum class NoiseTarget { modality_1, modality_2, both };

struct NoiseSpec {
    NoiseTarget target = NoiseTarget::modality_2;
    double sigma = 0.0;
    double prob = 1.0 / 3.0;
};

inline NoiseTarget noise_target_from_string(const std::string& s) {
    if (s == "modality_1") return NoiseTarget::modality_1;
    if (s == "modality_2") return NoiseTarget::modality_2;
    if (s == "both") return NoiseTarget::both;
    throw std::invalid_argument("unknown noise target '" + s + "'");
}

inline const char* to_string(NoiseTarget t) {
    switch (t) {
        case NoiseTarget::modality_1: return "modality_1";
        case NoiseTarget::modality_2: return "modality_2";
        case NoiseTarget::both: return "both";
    }
    return "?";
}

// Each sample independently, with probability prob, gets N(0, sigma^2)
// added to every targeted feature. Labels are untouched.
inline Dataset inject_noise(const Dataset& set, const NoiseSpec& spec, Rng& rng,
                            std::vector<bool>* injected = nullptr) {
    if (spec.sigma < 0.0) throw std::invalid_argument("inject_noise: sigma must be non-negative");
    if (spec.prob < 0.0 || spec.prob > 1.0) throw std::invalid_argument("inject_noise: prob must be in [0,1]");
    Dataset out = set;
    if (injected) injected->assign(set.size(), false);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::size_t> targets;
    if (spec.target != NoiseTarget::modality_2) targets.push_back(0);
    if (spec.target != NoiseTarget::modality_1) targets.push_back(1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(unit(rng) < spec.prob)) continue;
        if (injected) (*injected)[i] = true;
        if (spec.sigma == 0.0) continue;
        for (auto m : targets) {
            for (auto& v : out.samples[i].features.at(m)) v += spec.sigma * normal(rng);
        }
    }
    return out;
}

// --- .dmmd files ---
//
// "DMMD" | u16 version | u32 header length | JSON header |
// per sample: u8 difficulty, label (u32 class or f64 target), features as f64.
// All integers and floats little-endian.

class DatasetFormatError : public std::runtime_error {
   public:
    DatasetFormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const { return offset_; }

   private:
    std::size_t offset_;
};

inline constexpr std::array<char, 4> kDatasetMagic{'D', 'M', 'M', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

namespace detail {

class ByteWriter {
   public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffU));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        uint(bits);
    }
    const std::vector<unsigned char>& bytes() const { return bytes_; }

   private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
   public:
    explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw DatasetFormatError(std::string("truncated file while reading ") + what, pos_);
    }
    template <typename U>
    U uint(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    double f64(const char* what) {
        const auto bits = uint<std::uint64_t>(what);
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }

   private:
    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
};

inline void write_records(ByteWriter& w, const Dataset& d) {
    for (const auto& s : d.samples) {
        w.uint(static_cast<std::uint8_t>(s.difficulty));
        if (d.task == TaskKind::regression) {
            w.f64(s.label);
        } else {
            w.uint(static_cast<std::uint32_t>(s.class_index()));
        }
        for (std::size_t m = 0; m < d.dims.size(); ++m) {
            if (s.features.at(m).size() != d.dims[m]) throw std::invalid_argument("save_dataset: feature dim mismatch");
            for (double v : s.features[m]) w.f64(v);
        }
    }
}

inline void read_records(ByteReader& r, Dataset& d, std::size_t count) {
    d.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Sample s;
        const auto diff_at = r.offset();
        const auto diff = r.uint<std::uint8_t>("difficulty");
        if (diff > 1) throw DatasetFormatError("invalid difficulty byte", diff_at);
        s.difficulty = static_cast<Difficulty>(diff);
        if (d.task == TaskKind::regression) {
            s.label = r.f64("label");
        } else {
            const auto label_at = r.offset();
            const auto cls = r.uint<std::uint32_t>("label");
            if (cls >= d.num_classes) throw DatasetFormatError("class label out of range", label_at);
            s.label = static_cast<double>(cls);
        }
        s.features.resize(d.dims.size());
        for (std::size_t m = 0; m < d.dims.size(); ++m) {
            r.need(8 * d.dims[m], "features");
            s.features[m].resize(d.dims[m]);
            for (auto& v : s.features[m]) v = r.f64("features");
        }
        d.samples.push_back(std::move(s));
    }
}

}  // namespace detail

inline std::vector<unsigned char> encode_dataset(const DatasetSplit& split) {
    nlohmann::json header;
    header["spec"] = split.spec;
    header["task"] = to_string(split.train.task);
    header["num_classes"] = split.train.num_classes;
    header["modalities"] = split.train.dims.size();
    header["dims"] = split.train.dims;
    header["splits"] = nlohmann::json::array({{{"name", "train"}, {"count", split.train.size()}},
                                              {{"name", "test"}, {"count", split.test.size()}}});
    const std::string text = header.dump();
    detail::ByteWriter w;
    w.raw(kDatasetMagic.data(), kDatasetMagic.size());
    w.uint(kDatasetVersion);
    w.uint(static_cast<std::uint32_t>(text.size()));
    w.raw(text.data(), text.size());
    detail::write_records(w, split.train);
    detail::write_records(w, split.test);
    return w.bytes();
}

inline DatasetSplit decode_dataset(std::vector<unsigned char> bytes) {
    detail::ByteReader r(std::move(bytes));
    if (r.str(4, "magic") != std::string(kDatasetMagic.data(), 4)) throw DatasetFormatError("bad magic", 0);
    const auto version_at = r.offset();
    if (r.uint<std::uint16_t>("version") != kDatasetVersion) throw DatasetFormatError("unsupported version", version_at);
    const auto len = r.uint<std::uint32_t>("header length");
    const auto header_at = r.offset();
    nlohmann::json header;
    DatasetSplit out;
    std::size_t n_train = 0, n_test = 0;
    try {
        header = nlohmann::json::parse(r.str(len, "header"));
        out.spec = header.at("spec").get<SyntheticSpec>();
        Dataset proto;
        proto.task = task_from_string(header.at("task").get<std::string>());
        proto.num_classes = header.at("num_classes").get<std::size_t>();
        proto.dims = header.at("dims").get<std::vector<std::size_t>>();
        const auto modalities = header.at("modalities").get<std::size_t>();
        if (modalities != proto.dims.size()) {
            throw DatasetFormatError("header declares " + std::to_string(modalities) + " modalities but " +
                                         std::to_string(proto.dims.size()) + " dims",
                                     header_at);
        }
        if (modalities != out.spec.dims.size() || proto.dims != out.spec.dims) {
            throw DatasetFormatError("header modality layout disagrees with embedded spec", header_at);
        }
        for (const auto& s : header.at("splits")) {
            const auto name = s.at("name").get<std::string>();
            if (name == "train") n_train = s.at("count").get<std::size_t>();
            else if (name == "test") n_test = s.at("count").get<std::size_t>();
        }
        out.train = proto;
        out.test = proto;
    } catch (const nlohmann::json::exception& e) {
        throw DatasetFormatError(std::string("malformed header: ") + e.what(), header_at);
    }
    detail::read_records(r, out.train, n_train);
    detail::read_records(r, out.test, n_test);
    if (!r.at_end()) throw DatasetFormatError("unexpected trailing bytes after last record", r.offset());
    return out;
}

inline void save_dataset(const DatasetSplit& split, const std::string& path) {
    const auto bytes = encode_dataset(split);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

inline DatasetSplit load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_dataset(std::move(bytes));
}

// Columns: difficulty,label,m1_0..,m2_0..
inline void export_csv(const Dataset& d, std::ostream& os) {
    os << "difficulty,label";
    for (std::size_t m = 0; m < d.dims.size(); ++m) {
        for (std::size_t i = 0; i < d.dims[m]; ++i) os << ",m" << (m + 1) << '_' << i;
    }
    os << '\n';
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& s : d.samples) {
        os << (s.difficulty == Difficulty::easy ? "easy" : "hard") << ',';
        if (d.task == TaskKind::regression) os << s.label;
        else os << s.class_index();
        for (const auto& f : s.features) {
            for (double v : f) os << ',' << v;
        }
        os << '\n';
    }
}

// --- batching ---

struct Batch {
    std::vector<Tensor> features;  // [n x d_m] per modality
    std::vector<std::size_t> classes;
    std::vector<double> targets;
    std::vector<Difficulty> difficulty;

    std::size_t size() const { return difficulty.size(); }
};

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& indices) {
    Batch b;
    const std::size_t n = indices.size();
    for (std::size_t m = 0; m < d.dims.size(); ++m) {
        std::vector<double> values;
        values.reserve(n * d.dims[m]);
        for (auto i : indices) {
            const auto& f = d.samples.at(i).features[m];
            values.insert(values.end(), f.begin(), f.end());
        }
        b.features.emplace_back(Shape{n, d.dims[m]}, std::move(values));
    }
    for (auto i : indices) {
        const auto& s = d.samples[i];
        b.difficulty.push_back(s.difficulty);
        if (d.task == TaskKind::regression) b.targets.push_back(s.label);
        else b.classes.push_back(s.class_index());
    }
    return b;
}

inline Batch make_batch(const Dataset& d) {
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(d, idx);
}

}  // namespace dynmm
