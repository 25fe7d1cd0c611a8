#include "qsum/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace qsum {

namespace {

constexpr char kMagic[4] = {'Q', 'S', 'U', 'M'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::string& buf, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));  // little-endian platform
    buf.append(tmp, sizeof(T));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string get_str(size_t n) {
        need(n);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

const CkptTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string buf;
    buf.append(kMagic, 4);
    put<uint32_t>(buf, kVersion);
    put<uint32_t>(buf, static_cast<uint32_t>(ckpt.tensors.size()));
    for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const auto& t = ckpt.tensors[i];
        for (size_t j = 0; j < i; ++j)
            if (ckpt.tensors[j].name == t.name)
                throw std::runtime_error("checkpoint: duplicate tensor name '" + t.name + "'");
        put<uint32_t>(buf, static_cast<uint32_t>(t.name.size()));
        buf.append(t.name);
        put<uint8_t>(buf, static_cast<uint8_t>(t.dtype));
        put<uint8_t>(buf, static_cast<uint8_t>(t.dims.size()));
        for (int64_t d : t.dims) put<uint32_t>(buf, static_cast<uint32_t>(d));
        const size_t expect = dtype_size(t.dtype) * static_cast<size_t>(t.count());
        if (t.raw.size() != expect)
            throw std::runtime_error("checkpoint: tensor '" + t.name + "' has " +
                                     std::to_string(t.raw.size()) + " bytes, expected " +
                                     std::to_string(expect));
        buf.append(reinterpret_cast<const char*>(t.raw.data()), t.raw.size());
    }
    put<uint64_t>(buf, ckpt.config_hash);
    put<int32_t>(buf, ckpt.stage_id);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r{buf};
    // header is validated before any tensor payload is touched
    const std::string magic = r.get_str(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = r.get<uint32_t>();
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t count = r.get<uint32_t>();

    Checkpoint c;
    c.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CkptTensor t;
        const uint32_t name_len = r.get<uint32_t>();
        t.name = r.get_str(name_len);
        const uint8_t dt = r.get<uint8_t>();
        if (dt > 1) throw std::runtime_error("checkpoint: bad dtype code in '" + t.name + "'");
        t.dtype = static_cast<DType>(dt);
        const uint8_t rank = r.get<uint8_t>();
        for (uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.get<uint32_t>());
        const size_t bytes = dtype_size(t.dtype) * static_cast<size_t>(t.count());
        r.need(bytes);
        t.raw.assign(buf.data() + r.pos, buf.data() + r.pos + bytes);
        r.pos += bytes;
        for (const auto& prev : c.tensors)
            if (prev.name == t.name)
                throw std::runtime_error("checkpoint: duplicate tensor name '" + t.name + "'");
        c.tensors.push_back(std::move(t));
    }
    c.config_hash = r.get<uint64_t>();
    c.stage_id = r.get<int32_t>();
    if (r.pos != buf.size())
        throw std::runtime_error("checkpoint: trailing bytes after trailer in " + path);
    return c;
}

}  // namespace qsum
