#include "hvnet/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

namespace hvnet {

std::uint32_t crc32(const void* data, std::size_t length) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t n = 0; n < 256; ++n) {
            std::uint32_t c = n;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            }
            t[n] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    const auto* bytes = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < length; ++i) {
        crc = table[(crc ^ bytes[i]) & 0xFFu] ^ (crc >> 8);
    }
    return crc ^ 0xFFFFFFFFu;
}

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr char kMagic[4] = {'H', 'V', 'N', 'C'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& tensor) {
    if (name.size() > 0xFFFF) {
        throw std::invalid_argument("checkpoint: tensor name too long: \"" + name + "\"");
    }
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(1); // dtype: 64-bit float
    out.push_back(static_cast<std::uint8_t>(tensor.rank()));
    for (int d = 0; d < tensor.rank(); ++d) {
        put_u32(out, static_cast<std::uint32_t>(tensor.extent(d)));
    }
    for (double v : tensor.data()) {
        put_f64(out, v);
    }
}

Tensor scalar(double v) {
    return Tensor({1}, {v});
}

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, const std::string& path)
        : bytes_(bytes), path_(path) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error("checkpoint \"" + path_ + "\": " + what + " (offset " +
                                 std::to_string(pos_) + ")");
    }

    void need(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) {
            fail(std::string("truncated ") + what);
        }
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return bytes_[pos_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] |
                                                     (static_cast<std::uint16_t>(bytes_[pos_ + 1])
                                                      << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    double f64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 8;
        return std::bit_cast<double>(v);
    }
    float f32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return std::bit_cast<float>(v);
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::pair<std::string, Tensor> tensor() {
        const std::uint16_t name_len = u16("tensor name length");
        std::string name = str(name_len, "tensor name");
        const std::uint8_t dtype = u8("dtype tag");
        if (dtype > 1) {
            fail("unknown dtype tag " + std::to_string(dtype) + " for tensor \"" + name + "\"");
        }
        const std::uint8_t rank = u8("rank");
        if (rank < 1 || rank > 8) {
            fail("rank " + std::to_string(rank) + " out of range for tensor \"" + name + "\"");
        }
        std::vector<int> shape(rank);
        std::int64_t numel = 1;
        for (auto& e : shape) {
            const std::uint32_t extent = u32("extent");
            if (extent < 1 || extent > (1u << 20)) {
                fail("extent " + std::to_string(extent) + " out of range for tensor \"" + name +
                     "\"");
            }
            e = static_cast<int>(extent);
            numel *= e;
        }
        Tensor t(shape);
        auto data = t.data();
        for (std::int64_t i = 0; i < numel; ++i) {
            data[static_cast<std::size_t>(i)] =
                dtype == 1 ? f64("payload") : static_cast<double>(f32("payload"));
        }
        return {std::move(name), std::move(t)};
    }

    std::size_t pos() const { return pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

double require_scalar(const std::map<std::string, Tensor>& tensors, const std::string& name,
                      const std::string& path) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw std::runtime_error("checkpoint \"" + path + "\": missing tensor \"" + name + "\"");
    }
    if (it->second.numel() != 1) {
        throw std::runtime_error("checkpoint \"" + path + "\": tensor \"" + name +
                                 "\" is not scalar");
    }
    return it->second.data()[0];
}

} // namespace

void checkpoint_save(const Model& model, const CheckpointExtras* extras, int image_size,
                     const std::string& path) {
    std::map<std::string, Tensor> main_block;
    for (const auto& [name, tensor] : model.params()) {
        main_block.emplace(name, tensor);
    }
    for (const auto& [name, tensor] : model.buffers()) {
        main_block.emplace(name, tensor);
    }
    const ModelConfig& config = model.config();
    main_block.emplace("config.in_channels", scalar(config.in_channels));
    main_block.emplace("config.num_classes", scalar(config.num_classes));
    main_block.emplace("config.base_channels", scalar(config.base_channels));
    main_block.emplace("config.depth", scalar(config.depth));
    main_block.emplace("config.dropout_rate", scalar(config.dropout_rate));
    main_block.emplace("config.use_attention", scalar(config.use_attention ? 1.0 : 0.0));
    main_block.emplace("config.attention_reduction", scalar(config.attention_reduction));
    main_block.emplace("config.spatial_attention_kernel",
                       scalar(config.spatial_attention_kernel));
    main_block.emplace("config.elu_alpha", scalar(config.elu_alpha));
    main_block.emplace("config.init_seed_lo",
                       scalar(static_cast<double>(config.init_seed & 0xFFFFFFFFull)));
    main_block.emplace("config.init_seed_hi",
                       scalar(static_cast<double>(config.init_seed >> 32)));
    main_block.emplace("config.image_size", scalar(image_size));

    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(main_block.size()));
    for (const auto& [name, tensor] : main_block) {
        put_tensor(out, name, tensor);
    }

    if (extras != nullptr && extras->present) {
        std::map<std::string, Tensor> opt_block;
        for (const auto& [name, tensor] : extras->adam.m) {
            opt_block.emplace("adam.m." + name, tensor);
        }
        for (const auto& [name, tensor] : extras->adam.v) {
            opt_block.emplace("adam.v." + name, tensor);
        }
        opt_block.emplace("adam.t", scalar(static_cast<double>(extras->adam.t)));
        opt_block.emplace("sched.lr", scalar(extras->schedule.lr));
        opt_block.emplace("sched.best", scalar(extras->schedule.best));
        opt_block.emplace("sched.has_best", scalar(extras->schedule.has_best ? 1.0 : 0.0));
        opt_block.emplace("sched.stall", scalar(extras->schedule.stall));
        opt_block.emplace("trainer.epochs_completed", scalar(extras->epochs_completed));
        out.push_back(1);
        put_u32(out, static_cast<std::uint32_t>(opt_block.size()));
        for (const auto& [name, tensor] : opt_block) {
            put_tensor(out, name, tensor);
        }
    } else {
        out.push_back(0);
    }

    put_u32(out, crc32(out.data(), out.size()));

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) {
        throw std::runtime_error("cannot open \"" + path + "\" for writing");
    }
    file.write(reinterpret_cast<const char*>(out.data()),
               static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw std::runtime_error("write to \"" + path + "\" failed");
    }
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw std::runtime_error("cannot open \"" + path + "\" for reading");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                    std::istreambuf_iterator<char>());

    if (bytes.size() < 13) {
        throw std::runtime_error("checkpoint \"" + path + "\": file too short (" +
                                 std::to_string(bytes.size()) + " bytes)");
    }
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) {
        stored_crc |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
    }
    const std::uint32_t computed_crc = crc32(bytes.data(), bytes.size() - 4);
    if (stored_crc != computed_crc) {
        throw std::runtime_error("checkpoint \"" + path + "\": CRC mismatch (stored " +
                                 std::to_string(stored_crc) + ", computed " +
                                 std::to_string(computed_crc) + ")");
    }
    bytes.resize(bytes.size() - 4);

    Reader reader(bytes, path);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        reader.fail("bad magic (expected HVNC)");
    }
    (void)reader.str(4, "magic");
    const std::uint32_t version = reader.u32("version");
    if (version != kVersion) {
        reader.fail("unsupported version " + std::to_string(version));
    }

    auto read_block = [&](std::uint32_t count) {
        std::map<std::string, Tensor> block;
        for (std::uint32_t i = 0; i < count; ++i) {
            auto [name, tensor] = reader.tensor();
            if (!block.emplace(std::move(name), std::move(tensor)).second) {
                reader.fail("duplicate tensor name");
            }
        }
        return block;
    };

    const std::uint32_t tensor_count = reader.u32("tensor count");
    std::map<std::string, Tensor> main_block = read_block(tensor_count);

    CheckpointExtras extras;
    std::map<std::string, Tensor> opt_block;
    const std::uint8_t opt_flag = reader.u8("optimizer flag");
    if (opt_flag > 1) {
        reader.fail("optimizer flag must be 0 or 1, got " + std::to_string(opt_flag));
    }
    if (opt_flag == 1) {
        opt_block = read_block(reader.u32("optimizer tensor count"));
        extras.present = true;
    }
    if (reader.pos() != bytes.size()) {
        reader.fail("trailing bytes after optimizer block");
    }

    ModelConfig config;
    config.in_channels = static_cast<int>(require_scalar(main_block, "config.in_channels", path));
    config.num_classes = static_cast<int>(require_scalar(main_block, "config.num_classes", path));
    config.base_channels =
        static_cast<int>(require_scalar(main_block, "config.base_channels", path));
    config.depth = static_cast<int>(require_scalar(main_block, "config.depth", path));
    config.dropout_rate = require_scalar(main_block, "config.dropout_rate", path);
    config.use_attention = require_scalar(main_block, "config.use_attention", path) != 0.0;
    config.attention_reduction =
        static_cast<int>(require_scalar(main_block, "config.attention_reduction", path));
    config.spatial_attention_kernel =
        static_cast<int>(require_scalar(main_block, "config.spatial_attention_kernel", path));
    config.elu_alpha = require_scalar(main_block, "config.elu_alpha", path);
    const auto seed_lo =
        static_cast<std::uint64_t>(require_scalar(main_block, "config.init_seed_lo", path));
    const auto seed_hi =
        static_cast<std::uint64_t>(require_scalar(main_block, "config.init_seed_hi", path));
    config.init_seed = (seed_hi << 32) | (seed_lo & 0xFFFFFFFFull);
    const int image_size = static_cast<int>(require_scalar(main_block, "config.image_size", path));

    LoadedCheckpoint loaded{Model(config), std::move(extras), image_size};

    auto take = [&](const std::string& name, Tensor& dst) {
        auto it = main_block.find(name);
        if (it == main_block.end()) {
            throw std::runtime_error("checkpoint \"" + path + "\": missing tensor \"" + name +
                                     "\"");
        }
        if (it->second.shape() != dst.shape()) {
            throw std::runtime_error("checkpoint \"" + path + "\": tensor \"" + name +
                                     "\" has shape " + it->second.shape_string() + ", expected " +
                                     dst.shape_string());
        }
        auto src = it->second.data();
        auto out = dst.data();
        std::copy(src.begin(), src.end(), out.begin());
        main_block.erase(it);
    };
    for (auto& [name, tensor] : loaded.model.params()) {
        take(name, tensor);
    }
    for (auto& [name, tensor] : loaded.model.buffers()) {
        take(name, tensor);
    }
    for (const auto& [name, tensor] : main_block) {
        if (name.rfind("config.", 0) != 0) {
            throw std::runtime_error("checkpoint \"" + path + "\": unexpected tensor \"" + name +
                                     "\"");
        }
    }

    if (loaded.extras.present) {
        loaded.extras.adam.t =
            static_cast<std::int64_t>(require_scalar(opt_block, "adam.t", path));
        loaded.extras.schedule.lr = require_scalar(opt_block, "sched.lr", path);
        loaded.extras.schedule.best = require_scalar(opt_block, "sched.best", path);
        loaded.extras.schedule.has_best =
            require_scalar(opt_block, "sched.has_best", path) != 0.0;
        loaded.extras.schedule.stall =
            static_cast<int>(require_scalar(opt_block, "sched.stall", path));
        loaded.extras.epochs_completed =
            static_cast<int>(require_scalar(opt_block, "trainer.epochs_completed", path));
        for (auto& [name, tensor] : opt_block) {
            if (name.rfind("adam.m.", 0) == 0) {
                loaded.extras.adam.m.emplace(name.substr(7), std::move(tensor));
            } else if (name.rfind("adam.v.", 0) == 0) {
                loaded.extras.adam.v.emplace(name.substr(7), std::move(tensor));
            }
        }
        for (const auto& [name, moment] : loaded.extras.adam.m) {
            auto it = loaded.model.params().find(name);
            if (it == loaded.model.params().end()) {
                throw std::runtime_error("checkpoint \"" + path +
                                         "\": optimizer state for unknown parameter \"" + name +
                                         "\"");
            }
            if (moment.shape() != it->second.shape()) {
                throw std::runtime_error("checkpoint \"" + path +
                                         "\": optimizer state shape mismatch for \"" + name +
                                         "\"");
            }
        }
    }
    return loaded;
}

} // namespace hvnet
