#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "meda/entropy.hpp"
#include "meda/kvcache.hpp"
#include "meda/model.hpp"
#include "meda/types.hpp"

namespace meda {

// Tensor carrier for externally dumped attention inputs. Two encodings with
// the same schema:
//
//   binary (little-endian):
//     magic "MEDA" | u32 version | u32 L | u32 H | u32 D | u32 head_dim
//     | u32 prompt_len | u8 modality[prompt_len] | per layer:
//       u32 layer_index | u32 token_count | u8 flags (1=Q, 2=attention)
//       | u32 positions[tokens] | u32 merged[tokens]
//       | f32 K[H][tokens*head_dim] | f32 V[H][tokens*head_dim]
//       | f32 Q[H][tokens*head_dim] if flagged
//       | f32 A[tokens*tokens] if flagged
//
//   text: "meda-trace <version>" header, same fields line by line, floats
//   as C hexfloats so the round trip is bit-exact.

inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr char kTraceMagic[4] = {'M', 'E', 'D', 'A'};
inline constexpr char kTraceTextMagic[] = "meda-trace";

enum class TraceEncoding { Binary, Text };

struct TraceLayer {
    std::uint32_t layer_index = 0;
    std::vector<std::uint32_t> positions;
    std::vector<std::uint32_t> merged;
    std::vector<std::vector<float>> k;  // per head, token_count * head_dim
    std::vector<std::vector<float>> v;
    std::vector<std::vector<float>> q;          // empty when not dumped
    std::vector<float> attention;               // token_count^2 head-averaged, or empty

    std::size_t token_count() const { return positions.size(); }
    bool has_q() const { return !q.empty(); }
    bool has_attention() const { return !attention.empty(); }
};

struct TraceFile {
    std::uint32_t version = kTraceVersion;
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    std::uint32_t model_dim = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t prompt_len = 0;
    std::vector<Modality> modality;
    std::vector<TraceLayer> layers;

    void validate() const {
        if (num_layers == 0 || num_heads == 0 || head_dim == 0 ||
            static_cast<std::uint64_t>(num_heads) * head_dim != model_dim) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             "trace header: head_dim * num_heads must equal model_dim");
        }
        if (modality.size() != prompt_len || prompt_len == 0) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             "trace header: modality tags do not match prompt_len");
        }
        if (layers.size() != num_layers) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             "trace payload: layer count does not match header");
        }
        for (const TraceLayer& layer : layers) {
            const std::size_t t = layer.token_count();
            if (t == 0 || t > prompt_len) {
                throw TraceError(TraceError::Kind::ShapeMismatch,
                                 "trace layer: token count out of range");
            }
            if (layer.merged.size() != t) {
                throw TraceError(TraceError::Kind::ShapeMismatch,
                                 "trace layer: merged counts do not match tokens");
            }
            auto check_heads = [&](const std::vector<std::vector<float>>& mats, const char* name) {
                if (mats.size() != num_heads) {
                    throw TraceError(TraceError::Kind::ShapeMismatch,
                                     std::string("trace layer: ") + name + " head count mismatch");
                }
                for (const auto& m : mats) {
                    if (m.size() != t * head_dim) {
                        throw TraceError(TraceError::Kind::ShapeMismatch,
                                         std::string("trace layer: ") + name + " payload size mismatch");
                    }
                }
            };
            check_heads(layer.k, "K");
            check_heads(layer.v, "V");
            if (layer.has_q()) {
                check_heads(layer.q, "Q");
            }
            if (layer.has_attention() && layer.attention.size() != t * t) {
                throw TraceError(TraceError::Kind::ShapeMismatch,
                                 "trace layer: attention payload size mismatch");
            }
            for (std::uint32_t p : layer.positions) {
                if (p >= prompt_len) {
                    throw TraceError(TraceError::Kind::ShapeMismatch,
                                     "trace layer: token position out of range");
                }
            }
        }
    }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) {
    put_u32(os, std::bit_cast<std::uint32_t>(f));
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) {
        throw TraceError(TraceError::Kind::Truncated, "trace: unexpected end of file");
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is) {
    return std::bit_cast<float>(get_u32(is));
}

inline std::string hexfloat(float f) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%a", static_cast<double>(f));
    return buf;
}

inline float parse_float(const std::string& tok) {
    char* end = nullptr;
    const float f = std::strtof(tok.c_str(), &end);
    if (end == tok.c_str()) {
        throw TraceError(TraceError::Kind::ShapeMismatch, "trace: malformed float '" + tok + "'");
    }
    return f;
}

}  // namespace detail

inline void write_trace_binary(std::ostream& os, const TraceFile& t) {
    t.validate();
    os.write(kTraceMagic, 4);
    detail::put_u32(os, t.version);
    detail::put_u32(os, t.num_layers);
    detail::put_u32(os, t.num_heads);
    detail::put_u32(os, t.model_dim);
    detail::put_u32(os, t.head_dim);
    detail::put_u32(os, t.prompt_len);
    for (Modality m : t.modality) {
        const char c = static_cast<char>(m);
        os.write(&c, 1);
    }
    for (const TraceLayer& layer : t.layers) {
        detail::put_u32(os, layer.layer_index);
        detail::put_u32(os, static_cast<std::uint32_t>(layer.token_count()));
        const unsigned char flags =
            (layer.has_q() ? 1u : 0u) | (layer.has_attention() ? 2u : 0u);
        os.write(reinterpret_cast<const char*>(&flags), 1);
        for (std::uint32_t p : layer.positions) {
            detail::put_u32(os, p);
        }
        for (std::uint32_t m : layer.merged) {
            detail::put_u32(os, m);
        }
        auto put_heads = [&](const std::vector<std::vector<float>>& mats) {
            for (const auto& m : mats) {
                for (float f : m) {
                    detail::put_f32(os, f);
                }
            }
        };
        put_heads(layer.k);
        put_heads(layer.v);
        if (layer.has_q()) {
            put_heads(layer.q);
        }
        for (float f : layer.attention) {
            detail::put_f32(os, f);
        }
    }
}

inline void write_trace_text(std::ostream& os, const TraceFile& t) {
    t.validate();
    os << kTraceTextMagic << ' ' << t.version << '\n';
    os << "shape " << t.num_layers << ' ' << t.num_heads << ' ' << t.model_dim << ' '
       << t.head_dim << ' ' << t.prompt_len << '\n';
    os << "modality ";
    for (Modality m : t.modality) {
        os << modality_char(m);
    }
    os << '\n';
    for (const TraceLayer& layer : t.layers) {
        os << "layer " << layer.layer_index << " tokens " << layer.token_count() << " q "
           << (layer.has_q() ? 1 : 0) << " attention " << (layer.has_attention() ? 1 : 0) << '\n';
        os << "positions";
        for (std::uint32_t p : layer.positions) {
            os << ' ' << p;
        }
        os << '\n';
        os << "merged";
        for (std::uint32_t m : layer.merged) {
            os << ' ' << m;
        }
        os << '\n';
        auto put_heads = [&](const std::vector<std::vector<float>>& mats, const char* name) {
            for (std::size_t h = 0; h < mats.size(); ++h) {
                os << name << ' ' << h;
                for (float f : mats[h]) {
                    os << ' ' << detail::hexfloat(f);
                }
                os << '\n';
            }
        };
        put_heads(layer.k, "k");
        put_heads(layer.v, "v");
        if (layer.has_q()) {
            put_heads(layer.q, "q");
        }
        if (layer.has_attention()) {
            os << "attention";
            for (float f : layer.attention) {
                os << ' ' << detail::hexfloat(f);
            }
            os << '\n';
        }
    }
    os << "end\n";
}

inline void write_trace(const std::string& path, const TraceFile& t, TraceEncoding enc) {
    std::ofstream os(path, enc == TraceEncoding::Binary ? std::ios::binary : std::ios::out);
    if (!os) {
        throw TraceError(TraceError::Kind::Io, "trace: cannot open " + path + " for writing");
    }
    if (enc == TraceEncoding::Binary) {
        write_trace_binary(os, t);
    } else {
        write_trace_text(os, t);
    }
    if (!os) {
        throw TraceError(TraceError::Kind::Io, "trace: write failed on " + path);
    }
}

inline TraceFile read_trace_binary(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is) {
        throw TraceError(TraceError::Kind::Truncated, "trace: file too short for magic");
    }
    if (std::memcmp(magic, kTraceMagic, 4) != 0) {
        throw TraceError(TraceError::Kind::BadMagic, "trace: bad magic");
    }
    TraceFile t;
    t.version = detail::get_u32(is);
    if (t.version != kTraceVersion) {
        throw TraceError(TraceError::Kind::VersionMismatch,
                         "trace: version " + std::to_string(t.version) + ", expected " +
                             std::to_string(kTraceVersion));
    }
    t.num_layers = detail::get_u32(is);
    t.num_heads = detail::get_u32(is);
    t.model_dim = detail::get_u32(is);
    t.head_dim = detail::get_u32(is);
    t.prompt_len = detail::get_u32(is);
    if (static_cast<std::uint64_t>(t.num_heads) * t.head_dim != t.model_dim || t.num_layers == 0) {
        throw TraceError(TraceError::Kind::ShapeMismatch,
                         "trace header: head_dim * num_heads must equal model_dim");
    }
    if (t.prompt_len == 0 || t.prompt_len > (1u << 24) || t.num_layers > (1u << 16)) {
        throw TraceError(TraceError::Kind::ShapeMismatch, "trace header: implausible sizes");
    }
    t.modality.resize(t.prompt_len);
    for (std::uint32_t i = 0; i < t.prompt_len; ++i) {
        char c;
        is.read(&c, 1);
        if (!is) {
            throw TraceError(TraceError::Kind::Truncated, "trace: modality tags truncated");
        }
        if (c != 0 && c != 1) {
            throw TraceError(TraceError::Kind::ShapeMismatch, "trace: invalid modality tag");
        }
        t.modality[i] = static_cast<Modality>(c);
    }
    for (std::uint32_t l = 0; l < t.num_layers; ++l) {
        TraceLayer layer;
        layer.layer_index = detail::get_u32(is);
        const std::uint32_t tokens = detail::get_u32(is);
        if (tokens == 0 || tokens > t.prompt_len) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             "trace layer: token count out of range");
        }
        unsigned char flags;
        is.read(reinterpret_cast<char*>(&flags), 1);
        if (!is) {
            throw TraceError(TraceError::Kind::Truncated, "trace: layer flags truncated");
        }
        layer.positions.resize(tokens);
        for (auto& p : layer.positions) {
            p = detail::get_u32(is);
        }
        layer.merged.resize(tokens);
        for (auto& m : layer.merged) {
            m = detail::get_u32(is);
        }
        auto get_heads = [&](std::vector<std::vector<float>>& mats) {
            mats.resize(t.num_heads);
            for (auto& m : mats) {
                m.resize(static_cast<std::size_t>(tokens) * t.head_dim);
                for (float& f : m) {
                    f = detail::get_f32(is);
                }
            }
        };
        get_heads(layer.k);
        get_heads(layer.v);
        if (flags & 1u) {
            get_heads(layer.q);
        }
        if (flags & 2u) {
            layer.attention.resize(static_cast<std::size_t>(tokens) * tokens);
            for (float& f : layer.attention) {
                f = detail::get_f32(is);
            }
        }
        t.layers.push_back(std::move(layer));
    }
    t.validate();
    return t;
}

inline TraceFile read_trace_text(std::istream& is) {
    std::string magic;
    if (!(is >> magic)) {
        throw TraceError(TraceError::Kind::Truncated, "trace: empty file");
    }
    if (magic != kTraceTextMagic) {
        throw TraceError(TraceError::Kind::BadMagic, "trace: bad magic");
    }
    TraceFile t;
    if (!(is >> t.version)) {
        throw TraceError(TraceError::Kind::Truncated, "trace: header truncated");
    }
    if (t.version != kTraceVersion) {
        throw TraceError(TraceError::Kind::VersionMismatch,
                         "trace: version " + std::to_string(t.version) + ", expected " +
                             std::to_string(kTraceVersion));
    }
    auto expect = [&](const char* keyword) {
        std::string tok;
        if (!(is >> tok)) {
            throw TraceError(TraceError::Kind::Truncated,
                             std::string("trace: truncated before '") + keyword + "'");
        }
        if (tok != keyword) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             "trace: expected '" + std::string(keyword) + "', found '" + tok + "'");
        }
    };
    auto read_u32 = [&](const char* what) {
        long long v;
        if (!(is >> v)) {
            throw TraceError(TraceError::Kind::Truncated,
                             std::string("trace: truncated reading ") + what);
        }
        if (v < 0) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             std::string("trace: negative ") + what);
        }
        return static_cast<std::uint32_t>(v);
    };
    expect("shape");
    t.num_layers = read_u32("num_layers");
    t.num_heads = read_u32("num_heads");
    t.model_dim = read_u32("model_dim");
    t.head_dim = read_u32("head_dim");
    t.prompt_len = read_u32("prompt_len");
    if (static_cast<std::uint64_t>(t.num_heads) * t.head_dim != t.model_dim || t.num_layers == 0) {
        throw TraceError(TraceError::Kind::ShapeMismatch,
                         "trace header: head_dim * num_heads must equal model_dim");
    }
    expect("modality");
    std::string tags;
    if (!(is >> tags)) {
        throw TraceError(TraceError::Kind::Truncated, "trace: modality tags truncated");
    }
    if (tags.size() != t.prompt_len) {
        throw TraceError(TraceError::Kind::ShapeMismatch,
                         "trace: modality tags do not match prompt_len");
    }
    for (char c : tags) {
        if (c == 'T') {
            t.modality.push_back(Modality::Text);
        } else if (c == 'V') {
            t.modality.push_back(Modality::Vision);
        } else {
            throw TraceError(TraceError::Kind::ShapeMismatch, "trace: invalid modality tag");
        }
    }
    auto read_f32 = [&](const char* what) {
        std::string tok;
        if (!(is >> tok)) {
            throw TraceError(TraceError::Kind::Truncated,
                             std::string("trace: truncated reading ") + what);
        }
        return detail::parse_float(tok);
    };
    for (std::uint32_t l = 0; l < t.num_layers; ++l) {
        TraceLayer layer;
        expect("layer");
        layer.layer_index = read_u32("layer_index");
        expect("tokens");
        const std::uint32_t tokens = read_u32("token_count");
        if (tokens == 0 || tokens > t.prompt_len) {
            throw TraceError(TraceError::Kind::ShapeMismatch,
                             "trace layer: token count out of range");
        }
        expect("q");
        const bool has_q = read_u32("q flag") != 0;
        expect("attention");
        const bool has_attn = read_u32("attention flag") != 0;
        expect("positions");
        layer.positions.resize(tokens);
        for (auto& p : layer.positions) {
            p = read_u32("position");
        }
        expect("merged");
        layer.merged.resize(tokens);
        for (auto& m : layer.merged) {
            m = read_u32("merged count");
        }
        auto read_heads = [&](std::vector<std::vector<float>>& mats, const char* keyword) {
            mats.resize(t.num_heads);
            for (std::uint32_t h = 0; h < t.num_heads; ++h) {
                expect(keyword);
                const std::uint32_t head = read_u32("head index");
                if (head != h) {
                    throw TraceError(TraceError::Kind::ShapeMismatch,
                                     "trace: heads out of order");
                }
                mats[h].resize(static_cast<std::size_t>(tokens) * t.head_dim);
                for (float& f : mats[h]) {
                    f = read_f32(keyword);
                }
            }
        };
        read_heads(layer.k, "k");
        read_heads(layer.v, "v");
        if (has_q) {
            read_heads(layer.q, "q");
        }
        if (has_attn) {
            expect("attention");
            layer.attention.resize(static_cast<std::size_t>(tokens) * tokens);
            for (float& f : layer.attention) {
                f = read_f32("attention");
            }
        }
        t.layers.push_back(std::move(layer));
    }
    expect("end");
    t.validate();
    return t;
}

/// Loads either encoding, sniffing the magic bytes.
inline TraceFile read_trace(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw TraceError(TraceError::Kind::Io, "trace: cannot open " + path);
    }
    char head[4] = {0, 0, 0, 0};
    is.read(head, 4);
    if (is.gcount() == 0) {
        throw TraceError(TraceError::Kind::Truncated, "trace: empty file");
    }
    is.clear();
    is.seekg(0);
    if (std::memcmp(head, kTraceMagic, 4) == 0) {
        return read_trace_binary(is);
    }
    return read_trace_text(is);
}

// --- conversions --------------------------------------------------------

namespace detail {

inline std::vector<float> to_f32(const Matrix& m) {
    std::vector<float> out(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        out[i] = static_cast<float>(m.data[i]);
    }
    return out;
}

inline Matrix to_matrix(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < v.size(); ++i) {
        m.data[i] = static_cast<double>(v[i]);
    }
    return m;
}

}  // namespace detail

/// Serializes a prompt-encoding pass, including Q and head-averaged
/// attention so a trace round trip can drive the full pipeline.
inline TraceFile trace_from_encode(const EncodeResult& enc, const PromptSequence& prompt,
                                   const ModelConfig& cfg, bool include_q = true,
                                   bool include_attention = true) {
    TraceFile t;
    t.num_layers = static_cast<std::uint32_t>(cfg.num_layers);
    t.num_heads = static_cast<std::uint32_t>(cfg.num_heads);
    t.model_dim = static_cast<std::uint32_t>(cfg.model_dim);
    t.head_dim = static_cast<std::uint32_t>(cfg.head_dim());
    t.prompt_len = static_cast<std::uint32_t>(prompt.length());
    t.modality = prompt.modality;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        TraceLayer layer;
        layer.layer_index = static_cast<std::uint32_t>(l);
        const LayerKVCache& cache = enc.caches[l];
        for (const CachedToken& tok : cache.meta) {
            layer.positions.push_back(static_cast<std::uint32_t>(tok.original_position));
            layer.merged.push_back(static_cast<std::uint32_t>(tok.merged_count));
        }
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            layer.k.push_back(detail::to_f32(cache.keys[h]));
            layer.v.push_back(detail::to_f32(cache.values[h]));
        }
        if (include_q) {
            for (std::size_t h = 0; h < cfg.num_heads; ++h) {
                Matrix qh(prompt.length(), cfg.head_dim());
                for (std::size_t i = 0; i < prompt.length(); ++i) {
                    for (std::size_t j = 0; j < cfg.head_dim(); ++j) {
                        qh.at(i, j) = enc.layer_q[l].at(i, h * cfg.head_dim() + j);
                    }
                }
                layer.q.push_back(detail::to_f32(qh));
            }
        }
        if (include_attention) {
            layer.attention = detail::to_f32(enc.head_averaged_attention(l));
        }
        t.layers.push_back(std::move(layer));
    }
    return t;
}

/// Serializes compressed caches; Q and attention are dropped since the
/// selection already consumed them.
inline TraceFile trace_from_caches(const std::vector<LayerKVCache>& caches,
                                   const std::vector<Modality>& prompt_modality,
                                   std::size_t num_heads, std::size_t head_dim) {
    TraceFile t;
    t.num_layers = static_cast<std::uint32_t>(caches.size());
    t.num_heads = static_cast<std::uint32_t>(num_heads);
    t.head_dim = static_cast<std::uint32_t>(head_dim);
    t.model_dim = static_cast<std::uint32_t>(num_heads * head_dim);
    t.prompt_len = static_cast<std::uint32_t>(prompt_modality.size());
    t.modality = prompt_modality;
    for (const LayerKVCache& cache : caches) {
        TraceLayer layer;
        layer.layer_index = static_cast<std::uint32_t>(cache.layer_index);
        for (const CachedToken& tok : cache.meta) {
            layer.positions.push_back(static_cast<std::uint32_t>(tok.original_position));
            layer.merged.push_back(static_cast<std::uint32_t>(tok.merged_count));
        }
        for (std::size_t h = 0; h < num_heads; ++h) {
            layer.k.push_back(detail::to_f32(cache.keys[h]));
            layer.v.push_back(detail::to_f32(cache.values[h]));
        }
        t.layers.push_back(std::move(layer));
    }
    return t;
}

/// Rebuilds per-layer caches from a trace.
inline std::vector<LayerKVCache> caches_from_trace(const TraceFile& t) {
    t.validate();
    std::vector<LayerKVCache> caches;
    for (const TraceLayer& layer : t.layers) {
        LayerKVCache cache;
        cache.layer_index = layer.layer_index;
        const std::size_t tokens = layer.token_count();
        for (std::uint32_t h = 0; h < t.num_heads; ++h) {
            cache.keys.push_back(detail::to_matrix(layer.k[h], tokens, t.head_dim));
            cache.values.push_back(detail::to_matrix(layer.v[h], tokens, t.head_dim));
        }
        for (std::size_t i = 0; i < tokens; ++i) {
            cache.meta.push_back({layer.positions[i], t.modality[layer.positions[i]],
                                  layer.merged[i]});
        }
        caches.push_back(std::move(cache));
    }
    return caches;
}

}  // namespace meda
