#include "maskgan/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace maskgan {
namespace {

constexpr char kMagic[8] = {'M', 'G', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string() {
        const auto len = get<std::uint32_t>();
        need(len);
        std::string s = bytes_.substr(pos_, len);
        pos_ += len;
        return s;
    }
    void get_raw(void* dst, std::size_t len) {
        need(len);
        std::memcpy(dst, bytes_.data() + pos_, len);
        pos_ += len;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t len) const {
        if (pos_ + len > bytes_.size()) throw CheckpointError("checkpoint truncated");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::serialize() const {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, iteration);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        put_string(out, k);
        put_string(out, v);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_string(out, name);
        const Shape& s = t.shape();
        put<std::int32_t>(out, s.n);
        put<std::int32_t>(out, s.c);
        put<std::int32_t>(out, s.h);
        put<std::int32_t>(out, s.w);
        for (std::size_t i = 0; i < t.size(); ++i) put<float>(out, static_cast<float>(t[i]));
    }
    return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError("not a checkpoint (bad magic)");
    Reader r(bytes);
    char magic[8];
    r.get_raw(magic, sizeof(magic));
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.iteration = r.get<std::uint64_t>();
    const auto nmeta = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = r.get_string();
        ck.meta[k] = r.get_string();
    }
    const auto ntensors = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        std::string name = r.get_string();
        Shape s;
        s.n = r.get<std::int32_t>();
        s.c = r.get<std::int32_t>();
        s.h = r.get<std::int32_t>();
        s.w = r.get<std::int32_t>();
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw CheckpointError("negative extent in '" + name + "'");
        std::vector<float> raw(s.size());
        r.get_raw(raw.data(), raw.size() * sizeof(float));
        std::vector<Real> data(raw.begin(), raw.end());
        ck.tensors.emplace(std::move(name), Tensor(s, std::move(data)));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
    return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot write " + tmp.string());
        const std::string bytes = serialize();
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw CheckpointError("checkpoint has no '" + key + "' entry");
    return it->second;
}

std::map<std::string, Tensor> Checkpoint::with_prefix(const std::string& prefix) const {
    std::map<std::string, Tensor> out;
    for (auto it = tensors.lower_bound(prefix); it != tensors.end() && it->first.rfind(prefix, 0) == 0; ++it)
        out.emplace(it->first.substr(prefix.size()), it->second);
    return out;
}

void Checkpoint::put_all(const std::map<std::string, Tensor>& values, const std::string& prefix) {
    for (const auto& [name, t] : values) tensors[prefix + name] = t;
}

}  // namespace maskgan
