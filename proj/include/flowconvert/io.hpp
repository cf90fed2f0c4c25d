#pragma once

// On-disk formats. Arrays live in a small self-describing container:
//
//   8 bytes  magic "FCTENSR1"
//   8 bytes  header length, little-endian uint64
//   header   JSON {"format_version", "metadata", "tensors": {name: {dtype, shape, offset}}}
//   data     row-major little-endian f64 / i64 payloads, offsets relative to here
//
// Corpora are a manifest.json plus one container per utterance; checkpoints
// are one container per training stage.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"

namespace flowconvert {

using Json = nlohmann::json;
namespace fs = std::filesystem;

struct Tensor {
    enum class DType { f64, i64 };
    DType dtype = DType::f64;
    std::vector<std::int64_t> shape;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;

    std::size_t numel() const
    {
        std::size_t n = 1;
        for (auto s : shape) n *= static_cast<std::size_t>(s);
        return n;
    }
};

struct TensorFile {
    Json metadata = Json::object();
    std::map<std::string, Tensor> tensors;

    void put(const std::string& name, const Matrix& m)
    {
        Tensor t;
        t.shape = {m.rows(), m.cols()};
        t.f64.resize(static_cast<std::size_t>(m.size()));
        for (Index r = 0; r < m.rows(); ++r)
            for (Index c = 0; c < m.cols(); ++c) t.f64[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        tensors[name] = std::move(t);
    }

    void put(const std::string& name, const std::vector<int>& v)
    {
        Tensor t;
        t.dtype = Tensor::DType::i64;
        t.shape = {static_cast<std::int64_t>(v.size())};
        t.i64.assign(v.begin(), v.end());
        tensors[name] = std::move(t);
    }

    const Tensor& at(const std::string& name) const
    {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("missing tensor '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    Matrix matrix(const std::string& name) const
    {
        const Tensor& t = at(name);
        if (t.dtype != Tensor::DType::f64 || t.shape.size() != 2) throw IoError("tensor '" + name + "' is not a f64 matrix");
        Matrix m(t.shape[0], t.shape[1]);
        for (Index r = 0; r < m.rows(); ++r)
            for (Index c = 0; c < m.cols(); ++c) m(r, c) = t.f64[static_cast<std::size_t>(r * m.cols() + c)];
        return m;
    }

    std::vector<int> ints(const std::string& name) const
    {
        const Tensor& t = at(name);
        if (t.dtype != Tensor::DType::i64 || t.shape.size() != 1) throw IoError("tensor '" + name + "' is not an i64 vector");
        return std::vector<int>(t.i64.begin(), t.i64.end());
    }
};

namespace detail {

inline constexpr char kMagic[8] = {'F', 'C', 'T', 'E', 'N', 'S', 'R', '1'};

template <typename T>
void put_le(std::string& out, T v)
{
    static_assert(sizeof(T) == 8);
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const char* p)
{
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    T v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

} // namespace detail

inline std::string encode_tensor_file(const TensorFile& file)
{
    Json header;
    header["format_version"] = kFormatVersion;
    header["metadata"] = file.metadata;
    header["tensors"] = Json::object();
    std::string data;
    for (const auto& [name, t] : file.tensors) {
        FLOWCONVERT_EXPECT(t.numel() == (t.dtype == Tensor::DType::f64 ? t.f64.size() : t.i64.size()), ContractError,
                           "tensor '" + name + "' shape does not match its payload");
        header["tensors"][name] = {{"dtype", t.dtype == Tensor::DType::f64 ? "f64" : "i64"},
                                   {"shape", t.shape},
                                   {"offset", data.size()}};
        if (t.dtype == Tensor::DType::f64)
            for (double v : t.f64) detail::put_le(data, v);
        else
            for (auto v : t.i64) detail::put_le(data, v);
    }
    const std::string h = header.dump();
    std::string out(detail::kMagic, 8);
    detail::put_le(out, static_cast<std::uint64_t>(h.size()));
    return out + h + data;
}

inline TensorFile decode_tensor_file(const std::string& bytes, const std::string& what = "tensor file")
{
    if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kMagic, 8) != 0)
        throw IoError(what + ": not a tensor container");
    const auto hlen = detail::get_le<std::uint64_t>(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw IoError(what + ": truncated header");
    Json header;
    try {
        header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const Json::exception& e) {
        throw IoError(what + ": bad header: " + e.what());
    }
    if (header.value("format_version", -1) != kFormatVersion)
        throw IoError(what + ": unsupported format version");
    const std::size_t base = 16 + hlen;
    TensorFile file;
    file.metadata = header.value("metadata", Json::object());
    for (const auto& [name, info] : header.at("tensors").items()) {
        Tensor t;
        const std::string dtype = info.at("dtype");
        if (dtype == "f64") t.dtype = Tensor::DType::f64;
        else if (dtype == "i64") t.dtype = Tensor::DType::i64;
        else throw IoError(what + ": unknown dtype '" + dtype + "'");
        t.shape = info.at("shape").get<std::vector<std::int64_t>>();
        for (auto s : t.shape)
            if (s < 0) throw IoError(what + ": negative dimension in '" + name + "'");
        const std::size_t offset = info.at("offset").get<std::size_t>();
        const std::size_t n = t.numel();
        if (base + offset + 8 * n > bytes.size()) throw IoError(what + ": payload of '" + name + "' is truncated");
        const char* p = bytes.data() + base + offset;
        if (t.dtype == Tensor::DType::f64) {
            t.f64.resize(n);
            for (std::size_t i = 0; i < n; ++i) t.f64[i] = detail::get_le<double>(p + 8 * i);
        } else {
            t.i64.resize(n);
            for (std::size_t i = 0; i < n; ++i) t.i64[i] = detail::get_le<std::int64_t>(p + 8 * i);
        }
        file.tensors[name] = std::move(t);
    }
    return file;
}

inline void write_tensor_file(const fs::path& path, const TensorFile& file)
{
    detail::write_file(path, encode_tensor_file(file));
}

inline TensorFile read_tensor_file(const fs::path& path)
{
    return decode_tensor_file(detail::read_file(path), path.string());
}

inline void write_json(const fs::path& path, const Json& j)
{
    detail::write_file(path, j.dump(2) + "\n");
}

inline Json read_json(const fs::path& path)
{
    try {
        return Json::parse(detail::read_file(path));
    } catch (const Json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

/// Fields stamped on every artifact.
inline Json provenance(const RunConfig& config, const std::string& kind)
{
    return {{"kind", kind}, {"format_version", kFormatVersion}, {"config_hash", config_hash(config)},
            {"seed", config.seed}};
}

// ---------------------------------------------------------------------------
// Corpus

inline Json matrix_json(const Matrix& m)
{
    Json rows = Json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        rows.push_back(row);
    }
    return rows;
}

inline Matrix json_matrix(const Json& j, Index cols)
{
    Matrix m(static_cast<Index>(j.size()), cols);
    for (Index r = 0; r < m.rows(); ++r) {
        const auto row = j.at(static_cast<std::size_t>(r)).get<std::vector<double>>();
        if (static_cast<Index>(row.size()) != cols) throw IoError("ragged matrix in manifest");
        for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
    }
    return m;
}

inline RowVector json_row(const Json& j)
{
    const auto v = j.get<std::vector<double>>();
    RowVector r(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) r[static_cast<Index>(i)] = v[i];
    return r;
}

inline std::vector<double> row_values(const RowVector& r)
{
    return std::vector<double>(r.data(), r.data() + r.size());
}

inline fs::path utterance_path(const fs::path& corpus_dir, const std::string& id)
{
    return corpus_dir / "utterances" / (id + ".fct");
}

/// Writes manifest.json and one container per utterance. The manifest keeps
/// the corpus-generation settings as `section.key` strings.
inline void save_corpus(const Corpus& corpus, const RunConfig& config, const fs::path& dir)
{
    Json m = provenance(config, "corpus");
    Json settings = Json::object();
    {
        RunConfig c = config;
        for (const auto& f : detail::fields(c))
            if (f.section == "corpus" || f.section == "render") settings[f.section + "." + f.key] = detail::render(f);
    }
    m["corpus_config"] = settings;
    m["corpus_seed"] = corpus.seed;
    m["dim"] = corpus.dim();
    m["templates"] = matrix_json(corpus.templates);
    m["base_durations"] = corpus.base_durations;
    m["lexicon"] = corpus.lexicon;
    for (const auto& a : corpus.accents)
        m["accents"].push_back({{"id", a.id},
                                {"name", a.name},
                                {"remap_table", a.remap_table},
                                {"duration_multipliers", a.duration_multipliers},
                                {"spectral_shift", row_values(a.spectral_shift)}});
    for (const auto& s : corpus.speakers)
        m["speakers"].push_back({{"id", s.id},
                                 {"name", s.name},
                                 {"native_accent", s.native_accent},
                                 {"timbre_offset", row_values(s.timbre_offset)},
                                 {"noise_level", s.noise_level}});
    m["utterances"] = Json::array();
    for (const auto& u : corpus.utterances) {
        m["utterances"].push_back({{"id", u.id},
                                   {"speaker", u.speaker},
                                   {"accent", u.accent},
                                   {"index_in_speaker", u.index_in_speaker},
                                   {"frames", u.mel.frame_count()},
                                   {"file", "utterances/" + u.id + ".fct"}});
        TensorFile f;
        f.metadata = provenance(config, "utterance");
        f.metadata["id"] = u.id;
        f.metadata["speaker"] = u.speaker;
        f.metadata["accent"] = u.accent;
        f.metadata["index_in_speaker"] = u.index_in_speaker;
        f.put("mel", u.mel.frames);
        f.put("phonemes", u.phoneme_seq.phonemes);
        f.put("durations", u.phoneme_seq.durations);
        f.put("text", u.text);
        write_tensor_file(utterance_path(dir, u.id), f);
    }
    write_json(dir / "manifest.json", m);
}

inline Corpus load_corpus(const fs::path& dir)
{
    if (!fs::exists(dir / "manifest.json")) throw IoError("no corpus manifest in " + dir.string());
    const Json m = read_json(dir / "manifest.json");
    if (m.value("format_version", -1) != kFormatVersion) throw IoError("corpus manifest: unsupported format version");
    Corpus corpus;
    {
        RunConfig c;
        const auto table = detail::fields(c);
        for (const auto& [key, value] : m.at("corpus_config").items()) {
            bool found = false;
            for (const auto& f : table)
                if (f.section + "." + f.key == key) {
                    detail::assign(f, value.get<std::string>());
                    found = true;
                }
            if (!found) throw IoError("corpus manifest: unknown setting '" + key + "'");
        }
        corpus.config = c.corpus;
    }
    corpus.seed = m.at("corpus_seed").get<std::uint64_t>();
    const Index dim = m.at("dim").get<Index>();
    corpus.templates = json_matrix(m.at("templates"), dim);
    corpus.base_durations = m.at("base_durations").get<std::vector<int>>();
    corpus.lexicon = m.at("lexicon").get<std::vector<std::vector<int>>>();
    for (const auto& a : m.at("accents")) {
        AccentSpec spec;
        spec.id = a.at("id");
        spec.name = a.at("name");
        spec.remap_table = a.at("remap_table").get<std::vector<std::vector<int>>>();
        spec.duration_multipliers = a.at("duration_multipliers").get<std::vector<double>>();
        spec.spectral_shift = json_row(a.at("spectral_shift"));
        corpus.accents.push_back(std::move(spec));
    }
    for (const auto& s : m.at("speakers")) {
        SpeakerSpec spec;
        spec.id = s.at("id");
        spec.name = s.at("name");
        spec.native_accent = s.at("native_accent");
        spec.timbre_offset = json_row(s.at("timbre_offset"));
        spec.noise_level = s.at("noise_level");
        corpus.speakers.push_back(std::move(spec));
    }
    for (const auto& entry : m.at("utterances")) {
        const std::string id = entry.at("id");
        const TensorFile f = read_tensor_file(utterance_path(dir, id));
        Utterance u;
        u.id = id;
        u.speaker = entry.at("speaker");
        u.accent = entry.at("accent");
        u.index_in_speaker = entry.at("index_in_speaker");
        u.text = f.ints("text");
        u.phoneme_seq.phonemes = f.ints("phonemes");
        u.phoneme_seq.durations = f.ints("durations");
        u.mel.frames = f.matrix("mel");
        u.phoneme_seq.validate();
        if (u.mel.frame_count() != u.phoneme_seq.total_frames())
            throw IoError("utterance " + id + ": frame count does not match its durations");
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void put_parameters(TensorFile& f, const nn::ParameterList& params)
{
    for (auto* p : params) f.put(p->name, p->value);
}

inline void get_parameters(const TensorFile& f, const nn::ParameterList& params)
{
    std::map<std::string, Matrix> values;
    for (auto* p : params) values[p->name] = f.matrix(p->name);
    nn::restore(params, values);
}

inline void put_log(TensorFile& f, const TrainLog& log)
{
    f.metadata["train_steps"] = log.steps;
    f.metadata["initial_heldout"] = log.initial_heldout;
    f.metadata["final_heldout"] = log.final_heldout;
}

inline void save_flow(const fs::path& path, TrainedFlow& m, const RunConfig& config)
{
    TensorFile f;
    f.metadata = provenance(config, "checkpoint.flow");
    put_log(f, m.log);
    put_parameters(f, m.parameters());
    for (std::size_t s = 0; s < m.flow.steps().size(); ++s) {
        const auto& mix = m.flow.steps()[s].mixing;
        const std::string name = "flow.step" + std::to_string(s) + ".mixing";
        f.put(name + ".permutation", mix.permutation());
        f.put(name + ".sign", Matrix(mix.sign()));
    }
    write_tensor_file(path, f);
}

inline TrainedFlow load_flow(const fs::path& path, const RunConfig& config)
{
    const TensorFile f = read_tensor_file(path);
    Rng rng(0);
    TrainedFlow m{FeatureStack(config.features, rng), FlowModel(config.flow, rng), {}};
    get_parameters(f, m.parameters());
    for (std::size_t s = 0; s < m.flow.steps().size(); ++s) {
        const std::string name = "flow.step" + std::to_string(s) + ".mixing";
        m.flow.steps()[s].mixing.set_constants(f.matrix(name + ".permutation"), f.matrix(name + ".sign").row(0));
    }
    return m;
}

inline void save_duration(const fs::path& path, TrainedDuration& m, const RunConfig& config)
{
    TensorFile f;
    f.metadata = provenance(config, "checkpoint.duration");
    put_log(f, m.log);
    put_parameters(f, m.model.parameters());
    write_tensor_file(path, f);
}

inline DurationModel load_duration(const fs::path& path, const RunConfig& config)
{
    const TensorFile f = read_tensor_file(path);
    Rng rng(0);
    DurationModel m(config.duration, rng);
    get_parameters(f, m.parameters());
    return m;
}

inline void save_attention(const fs::path& path, TrainedAttention& m, const RunConfig& config)
{
    TensorFile f;
    f.metadata = provenance(config, "checkpoint.attention");
    put_log(f, m.log);
    f.metadata["heldout_attend_mse"] = m.heldout.attend_mse;
    f.metadata["heldout_corrupted_mse"] = m.heldout.corrupted_mse;
    f.metadata["heldout_mean_entropy"] = m.heldout.mean_entropy;
    put_parameters(f, m.block.parameters());
    write_tensor_file(path, f);
}

inline AttentionBlock load_attention(const fs::path& path, const RunConfig& config)
{
    const TensorFile f = read_tensor_file(path);
    Rng rng(0);
    AttentionBlock b(config.attention, rng);
    get_parameters(f, b.parameters());
    return b;
}

inline void save_classifiers(const fs::path& path, ProxyClassifiers& c, const RunConfig& config)
{
    TensorFile f;
    f.metadata = provenance(config, "checkpoint.classifiers");
    for (auto* clf : {&c.accent, &c.speaker}) {
        const std::string name = std::string(to_string(clf->kind())) + "_classifier";
        f.put(name + ".feature_mean", Matrix(clf->feature_mean()));
        f.put(name + ".feature_scale", Matrix(clf->feature_scale()));
        nn::ParameterList params;
        clf->collect(params);
        put_parameters(f, params);
    }
    f.put("phoneme_classifier.feature_mean", Matrix(c.phoneme.feature_mean()));
    f.put("phoneme_classifier.feature_scale", Matrix(c.phoneme.feature_scale()));
    nn::ParameterList params;
    c.phoneme.collect(params);
    put_parameters(f, params);
    write_tensor_file(path, f);
}

inline ProxyClassifiers load_classifiers(const fs::path& path, const RunConfig& config)
{
    const TensorFile f = read_tensor_file(path);
    const auto& cc = config.corpus;
    ProxyClassifiers c;
    c.accent = UtteranceClassifier(ClassifierKind::accent, Pooling::mean_delta, cc.n_accents, cc.dim);
    c.speaker = UtteranceClassifier(ClassifierKind::speaker, Pooling::mean, cc.n_speakers, cc.dim);
    for (auto* clf : {&c.accent, &c.speaker}) {
        const std::string name = std::string(to_string(clf->kind())) + "_classifier";
        clf->set_state(f.matrix(name + ".feature_mean").row(0), f.matrix(name + ".feature_scale").row(0),
                       f.matrix(name + ".weight"), f.matrix(name + ".bias"));
    }
    Rng rng(0);
    c.phoneme = PhonemeClassifier(cc.n_phonemes, cc.dim, config.train_classifiers.context,
                                  config.train_classifiers.hidden, rng);
    nn::ParameterList params;
    c.phoneme.collect(params);
    get_parameters(f, params);
    c.phoneme.set_state(f.matrix("phoneme_classifier.feature_mean").row(0),
                        f.matrix("phoneme_classifier.feature_scale").row(0));
    return c;
}

inline void write_text(const fs::path& path, const std::string& text)
{
    detail::write_file(path, text);
}

} // namespace flowconvert
