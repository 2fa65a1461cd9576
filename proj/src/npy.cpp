#include "qmerge/npy.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

namespace qmerge {

namespace {

constexpr std::uint8_t kMagic[] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
constexpr std::size_t kMaxDims = 4;

std::string shape_tuple(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    if (shape.size() == 1) s += ",";
    return s + ")";
}

/// Value text for `key` inside the header dict, e.g. "'<f8'" or "(2, 3)".
std::string dict_value(const std::string& header, const std::string& key) {
    const std::string quoted[] = {"'" + key + "'", "\"" + key + "\""};
    std::size_t pos = std::string::npos;
    std::size_t key_len = 0;
    for (const auto& q : quoted) {
        pos = header.find(q);
        if (pos != std::string::npos) {
            key_len = q.size();
            break;
        }
    }
    if (pos == std::string::npos) throw Error(Errc::not_npy, "header lacks key " + key);
    pos = header.find(':', pos + key_len);
    if (pos == std::string::npos) throw Error(Errc::not_npy, "malformed header near " + key);
    ++pos;
    while (pos < header.size() && header[pos] == ' ') ++pos;
    if (pos >= header.size()) throw Error(Errc::not_npy, "malformed header near " + key);
    std::size_t end;
    if (header[pos] == '(') {
        end = header.find(')', pos);
        if (end == std::string::npos) throw Error(Errc::not_npy, "unterminated shape tuple");
        ++end;
    } else if (header[pos] == '\'' || header[pos] == '"') {
        end = header.find(header[pos], pos + 1);
        if (end == std::string::npos) throw Error(Errc::not_npy, "unterminated string");
        ++end;
    } else {
        end = header.find_first_of(",}", pos);
        if (end == std::string::npos) throw Error(Errc::not_npy, "malformed header near " + key);
    }
    std::string v = header.substr(pos, end - pos);
    while (!v.empty() && v.back() == ' ') v.pop_back();
    return v;
}

std::vector<std::size_t> parse_shape(const std::string& tuple) {
    std::vector<std::size_t> shape;
    std::string inner = tuple.substr(1, tuple.size() - 2);
    std::size_t pos = 0;
    while (pos < inner.size()) {
        while (pos < inner.size() && (inner[pos] == ' ' || inner[pos] == ',')) ++pos;
        if (pos >= inner.size()) break;
        std::size_t end = pos;
        while (end < inner.size() && inner[end] >= '0' && inner[end] <= '9') ++end;
        if (end == pos) throw Error(Errc::not_npy, "bad shape tuple " + tuple);
        shape.push_back(static_cast<std::size_t>(std::stoull(inner.substr(pos, end - pos))));
        pos = end;
    }
    return shape;
}

template <typename T>
T load_le(const std::uint8_t* p) {
    T v;
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(buf), std::end(buf));
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

template <typename T>
void store_le(std::uint8_t* p, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(buf), std::end(buf));
    std::memcpy(p, buf, sizeof(T));
}

}  // namespace

std::size_t NpyArray::element_count() const noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double> NpyArray::values() const {
    const std::size_t n = element_count();
    if (payload.size() != n * element_size()) throw Error(Errc::payload_truncated, "payload length mismatch");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = dtype == NpyDtype::f4 ? static_cast<double>(load_le<float>(payload.data() + 4 * i))
                                       : load_le<double>(payload.data() + 8 * i);
    }
    return out;
}

NpyArray NpyArray::from_values(std::vector<std::size_t> shape, std::span<const double> values, NpyDtype dtype) {
    NpyArray a;
    a.dtype = dtype;
    a.shape = std::move(shape);
    if (values.size() != a.element_count()) throw Error(Errc::invalid_shape, "value count does not match shape");
    a.payload.resize(values.size() * a.element_size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (dtype == NpyDtype::f4)
            store_le<float>(a.payload.data() + 4 * i, static_cast<float>(values[i]));
        else
            store_le<double>(a.payload.data() + 8 * i, values[i]);
    }
    return a;
}

std::vector<std::uint8_t> encode_npy(const NpyArray& arr) {
    if (arr.fortran_order) throw Error(Errc::unsupported_layout, "only C-order arrays are written");
    if (arr.shape.empty() || arr.shape.size() > kMaxDims)
        throw Error(Errc::unsupported_layout, "arrays must have 1 to 4 dims");
    if (arr.payload.size() != arr.element_count() * arr.element_size())
        throw Error(Errc::payload_truncated, "payload length does not match shape");
    std::string header = "{'descr': '";
    header += arr.dtype == NpyDtype::f4 ? "<f4" : "<f8";
    header += "', 'fortran_order': False, 'shape': " + shape_tuple(arr.shape) + ", }";
    const std::size_t preamble = sizeof(kMagic) + 2 + 2;
    const std::size_t total = ((preamble + header.size() + 1 + 63) / 64) * 64;
    header.append(total - preamble - header.size() - 1, ' ');
    header += '\n';
    if (header.size() > 0xffff) throw Error(Errc::unsupported_layout, "header too long for format 1.0");

    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.push_back(1);
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
    out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), arr.payload.begin(), arr.payload.end());
    return out;
}

NpyArray decode_npy(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 10 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw Error(Errc::not_npy, "missing NPY magic");
    const std::uint8_t major = bytes[6];
    std::size_t header_len = 0;
    std::size_t offset = 0;
    if (major == 1) {
        header_len = static_cast<std::size_t>(bytes[8]) | (static_cast<std::size_t>(bytes[9]) << 8);
        offset = 10;
    } else if (major == 2 || major == 3) {
        if (bytes.size() < 12) throw Error(Errc::not_npy, "short preamble");
        header_len = static_cast<std::size_t>(load_le<std::uint32_t>(bytes.data() + 8));
        offset = 12;
    } else {
        throw Error(Errc::not_npy, "unknown format version " + std::to_string(major));
    }
    if (bytes.size() < offset + header_len) throw Error(Errc::not_npy, "header truncated");
    const std::string header(reinterpret_cast<const char*>(bytes.data() + offset), header_len);

    NpyArray arr;
    const std::string descr = dict_value(header, "descr");
    if (descr == "'<f8'" || descr == "\"<f8\"")
        arr.dtype = NpyDtype::f8;
    else if (descr == "'<f4'" || descr == "\"<f4\"")
        arr.dtype = NpyDtype::f4;
    else
        throw Error(Errc::unsupported_dtype, "dtype " + descr + " (expected <f4 or <f8)");

    const std::string order = dict_value(header, "fortran_order");
    if (order == "True") throw Error(Errc::unsupported_layout, "fortran_order arrays are not supported");
    if (order != "False") throw Error(Errc::not_npy, "bad fortran_order value " + order);

    const std::string shape = dict_value(header, "shape");
    if (shape.front() != '(') throw Error(Errc::not_npy, "shape is not a tuple");
    arr.shape = parse_shape(shape);
    if (arr.shape.empty() || arr.shape.size() > kMaxDims)
        throw Error(Errc::unsupported_layout, "arrays must have 1 to 4 dims");

    const std::size_t need = arr.element_count() * arr.element_size();
    const std::size_t have = bytes.size() - offset - header_len;
    if (have < need)
        throw Error(Errc::payload_truncated, "payload has " + std::to_string(have) + " bytes, need " + std::to_string(need));
    arr.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset + header_len),
                       bytes.begin() + static_cast<std::ptrdiff_t>(offset + header_len + need));
    return arr;
}

NpyArray read_npy(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_npy(bytes);
    } catch (const Error& e) {
        rethrow_in_stage(path.string(), e);
    }
}

void write_npy(const NpyArray& arr, const std::filesystem::path& path) {
    const auto bytes = encode_npy(arr);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_failure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io_failure, "write failed for " + path.string());
}

NpyArray npy_from_matrix(const Matrix& m) { return NpyArray::from_values({m.rows(), m.cols()}, m.data()); }

NpyArray npy_from_stack(const EmbeddingStack& stack) {
    std::vector<double> values;
    for (const auto& layer : stack.layers) values.insert(values.end(), layer.data().begin(), layer.data().end());
    return NpyArray::from_values({stack.num_layers(), stack.tokens(), stack.dim()}, values);
}

Matrix npy_to_matrix(const NpyArray& arr) {
    if (arr.shape.size() != 2) throw Error(Errc::invalid_shape, "expected a 2-D array");
    return Matrix(arr.shape[0], arr.shape[1], arr.values());
}

EmbeddingStack npy_to_stack(const NpyArray& arr) {
    EmbeddingStack stack;
    if (arr.shape.size() == 2) {
        stack.layers.push_back(npy_to_matrix(arr));
    } else if (arr.shape.size() == 3) {
        const auto values = arr.values();
        const std::size_t per = arr.shape[1] * arr.shape[2];
        for (std::size_t l = 0; l < arr.shape[0]; ++l) {
            std::vector<double> layer(values.begin() + static_cast<std::ptrdiff_t>(l * per),
                                      values.begin() + static_cast<std::ptrdiff_t>((l + 1) * per));
            stack.layers.emplace_back(arr.shape[1], arr.shape[2], std::move(layer));
        }
    } else {
        throw Error(Errc::invalid_shape, "embedding input must be N x D or L x N x D");
    }
    return stack;
}

std::vector<Matrix> npy_to_sequences(const NpyArray& arr) {
    if (arr.shape.size() == 2) return {npy_to_matrix(arr)};
    if (arr.shape.size() != 3) throw Error(Errc::invalid_shape, "sequence corpus must be B x K x D");
    return npy_to_stack(arr).layers;
}

}  // namespace qmerge
