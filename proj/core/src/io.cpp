#include "diffreg/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace diffreg {

namespace {

// little-endian scalar access into a byte buffer
template <typename T>
T read_le(const char* buf) {
    static_assert(sizeof(T) <= 8);
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
    if constexpr (sizeof(T) == 1)
        return std::bit_cast<T>(static_cast<std::uint8_t>(bits));
    else if constexpr (sizeof(T) == 2)
        return std::bit_cast<T>(static_cast<std::uint16_t>(bits));
    else if constexpr (sizeof(T) == 4)
        return std::bit_cast<T>(static_cast<std::uint32_t>(bits));
    else
        return std::bit_cast<T>(bits);
}

template <typename T>
void write_le(char* buf, T value) {
    std::uint64_t bits = 0;
    if constexpr (sizeof(T) == 1) bits = std::bit_cast<std::uint8_t>(value);
    if constexpr (sizeof(T) == 2) bits = std::bit_cast<std::uint16_t>(value);
    if constexpr (sizeof(T) == 4) bits = std::bit_cast<std::uint32_t>(value);
    if constexpr (sizeof(T) == 8) bits = std::bit_cast<std::uint64_t>(value);
    for (std::size_t b = 0; b < sizeof(T); ++b)
        buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
}

std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw FormatError("cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<char> buf(static_cast<std::size_t>(size));
    in.read(buf.data(), size);
    if (!in.good()) throw FormatError("cannot read '" + path + "'");
    return buf;
}

void write_file_bytes(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw FormatError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw FormatError("write failed for '" + path + "'");
}

constexpr int kNiftiHeaderSize = 348;
constexpr int kDtUint8 = 2;
constexpr int kDtInt16 = 4;
constexpr int kDtInt32 = 8;
constexpr int kDtFloat32 = 16;
constexpr int kDtFloat64 = 64;

int datatype_bytes(int dt) {
    switch (dt) {
        case kDtUint8:
            return 1;
        case kDtInt16:
            return 2;
        case kDtInt32:
            return 4;
        case kDtFloat32:
            return 4;
        case kDtFloat64:
            return 8;
        default:
            return 0;
    }
}

struct ParsedNifti {
    Shape shape;
    std::vector<double> spacing;
    std::vector<double> values;  // slope/inter applied
    std::vector<char> header;
    int datatype = 0;
};

ParsedNifti parse_nifti(const std::string& path) {
    const std::vector<char> bytes = read_file_bytes(path);
    if (bytes.size() < kNiftiHeaderSize + 4)
        throw FormatError("'" + path + "': file too small for a NIfTI-1 header");

    const int sizeof_hdr = read_le<std::int32_t>(bytes.data());
    if (sizeof_hdr != kNiftiHeaderSize)
        throw FormatError("'" + path + "': sizeof_hdr is " + std::to_string(sizeof_hdr) +
                          ", expected 348 (big-endian or non-NIfTI input is unsupported)");
    if (std::memcmp(bytes.data() + 344, "n+1", 3) != 0 || bytes[347] != '\0')
        throw FormatError("'" + path + "': bad NIfTI magic (expected \"n+1\")");

    std::int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = read_le<std::int16_t>(bytes.data() + 40 + 2 * i);
    const int nd = dim[0];
    if (nd < 1 || nd > 7)
        throw FormatError("'" + path + "': implausible dim[0] = " + std::to_string(nd));
    for (int i = 4; i <= nd; ++i)
        if (dim[i] > 1)
            throw FormatError("'" + path + "': more than three spatial dimensions are unsupported");

    ParsedNifti out;
    const int spatial = std::min(nd, 3);
    for (int i = 1; i <= spatial; ++i) {
        if (dim[i] < 1) throw FormatError("'" + path + "': non-positive dimension");
        out.shape.push_back(dim[i]);
    }
    for (int i = 1; i <= spatial; ++i) {
        const float p = read_le<float>(bytes.data() + 76 + 4 * i);
        out.spacing.push_back(p > 0.0f ? static_cast<double>(p) : 1.0);
    }

    out.datatype = read_le<std::int16_t>(bytes.data() + 70);
    const int bpv = datatype_bytes(out.datatype);
    if (bpv == 0)
        throw FormatError("'" + path + "': unsupported NIfTI datatype " +
                          std::to_string(out.datatype));

    const float vox_offset_f = read_le<float>(bytes.data() + 108);
    const std::size_t vox_offset = static_cast<std::size_t>(vox_offset_f);
    if (vox_offset_f < kNiftiHeaderSize || vox_offset > bytes.size())
        throw FormatError("'" + path + "': bad vox_offset");

    const std::size_t n = voxel_count(out.shape);
    if (bytes.size() < vox_offset + n * bpv)
        throw FormatError("'" + path + "': truncated payload (" +
                          std::to_string(bytes.size() - vox_offset) + " bytes, need " +
                          std::to_string(n * bpv) + ")");

    float slope = read_le<float>(bytes.data() + 112);
    float inter = read_le<float>(bytes.data() + 116);
    const bool scale = slope != 0.0f;

    out.values.resize(n);
    const char* payload = bytes.data() + vox_offset;
    for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        switch (out.datatype) {
            case kDtUint8:
                v = static_cast<unsigned char>(payload[i]);
                break;
            case kDtInt16:
                v = read_le<std::int16_t>(payload + 2 * i);
                break;
            case kDtInt32:
                v = read_le<std::int32_t>(payload + 4 * i);
                break;
            case kDtFloat32:
                v = read_le<float>(payload + 4 * i);
                break;
            default:
                v = read_le<double>(payload + 8 * i);
                break;
        }
        out.values[i] = scale ? v * slope + inter : v;
    }
    out.header.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(vox_offset));
    return out;
}

std::vector<char> fresh_nifti_header(const Shape& shape, const std::vector<double>& spacing,
                                     int datatype) {
    std::vector<char> h(kNiftiHeaderSize + 4, 0);  // header + zero extender
    write_le<std::int32_t>(h.data(), kNiftiHeaderSize);
    std::int16_t dim[8] = {static_cast<std::int16_t>(shape.size()), 1, 1, 1, 1, 1, 1, 1};
    for (std::size_t i = 0; i < shape.size(); ++i) dim[i + 1] = static_cast<std::int16_t>(shape[i]);
    for (int i = 0; i < 8; ++i) write_le<std::int16_t>(h.data() + 40 + 2 * i, dim[i]);
    write_le<std::int16_t>(h.data() + 70, static_cast<std::int16_t>(datatype));
    write_le<std::int16_t>(h.data() + 72, static_cast<std::int16_t>(8 * datatype_bytes(datatype)));
    float pixdim[8] = {1, 1, 1, 1, 1, 1, 1, 1};
    for (std::size_t i = 0; i < shape.size() && i < spacing.size(); ++i)
        pixdim[i + 1] = static_cast<float>(spacing[i]);
    for (int i = 0; i < 8; ++i) write_le<float>(h.data() + 76 + 4 * i, pixdim[i]);
    write_le<float>(h.data() + 108, 352.0f);  // vox_offset
    write_le<float>(h.data() + 112, 1.0f);    // scl_slope
    write_le<float>(h.data() + 116, 0.0f);    // scl_inter
    std::memcpy(h.data() + 344, "n+1", 4);
    return h;
}

std::vector<char> patched_header(const std::vector<char>& passthrough, const Shape& shape,
                                 int datatype) {
    require(passthrough.size() >= kNiftiHeaderSize, "write_nifti: passthrough header too small");
    std::vector<char> h = passthrough;
    std::int16_t dim[8] = {static_cast<std::int16_t>(shape.size()), 1, 1, 1, 1, 1, 1, 1};
    for (std::size_t i = 0; i < shape.size(); ++i) dim[i + 1] = static_cast<std::int16_t>(shape[i]);
    for (int i = 0; i < 8; ++i) write_le<std::int16_t>(h.data() + 40 + 2 * i, dim[i]);
    write_le<std::int16_t>(h.data() + 70, static_cast<std::int16_t>(datatype));
    write_le<std::int16_t>(h.data() + 72, static_cast<std::int16_t>(8 * datatype_bytes(datatype)));
    write_le<float>(h.data() + 108, static_cast<float>(h.size()));
    write_le<float>(h.data() + 112, 1.0f);
    write_le<float>(h.data() + 116, 0.0f);
    return h;
}

}  // namespace

NiftiVolume read_nifti(const std::string& path) {
    ParsedNifti parsed = parse_nifti(path);
    NiftiVolume out;
    out.volume.shape = parsed.shape;
    out.volume.spacing = parsed.spacing;
    out.volume.data = std::move(parsed.values);
    out.header = std::move(parsed.header);
    out.datatype = parsed.datatype;
    return out;
}

void write_nifti(const std::string& path, const ScalarVolume& volume,
                 const std::vector<char>* passthrough_header) {
    std::vector<char> bytes = passthrough_header
                                  ? patched_header(*passthrough_header, volume.shape, kDtFloat32)
                                  : fresh_nifti_header(volume.shape, volume.spacing, kDtFloat32);
    const std::size_t offset = bytes.size();
    bytes.resize(offset + volume.size() * 4);
    for (std::size_t i = 0; i < volume.size(); ++i)
        write_le<float>(bytes.data() + offset + 4 * i, static_cast<float>(volume.data[i]));
    write_file_bytes(path, bytes);
}

LabelVolume read_nifti_labels(const std::string& path) {
    ParsedNifti parsed = parse_nifti(path);
    if (parsed.datatype == kDtFloat32 || parsed.datatype == kDtFloat64)
        throw FormatError("'" + path + "': label volumes must use an integer datatype");
    LabelVolume out(parsed.shape);
    for (std::size_t i = 0; i < parsed.values.size(); ++i)
        out.data[i] = static_cast<int>(std::lround(parsed.values[i]));
    out.rebuild_labelset();
    return out;
}

void write_nifti_labels(const std::string& path, const LabelVolume& labels) {
    int lo = 0, hi = 0;
    for (int v : labels.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    require(lo >= -32768 && hi <= 32767, "write_nifti_labels: labels exceed int16 range");
    const bool narrow = lo >= 0 && hi <= 255;
    const int datatype = narrow ? kDtUint8 : kDtInt16;
    std::vector<char> bytes = fresh_nifti_header(labels.shape, {}, datatype);
    const std::size_t offset = bytes.size();
    bytes.resize(offset + labels.size() * (narrow ? 1 : 2));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (narrow)
            bytes[offset + i] = static_cast<char>(static_cast<unsigned char>(labels.data[i]));
        else
            write_le<std::int16_t>(bytes.data() + offset + 2 * i,
                                   static_cast<std::int16_t>(labels.data[i]));
    }
    write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// DRV1

void write_raw(const std::string& path, const ScalarVolume& volume) {
    require(volume.dims() >= 1 && volume.dims() <= 3, "write_raw: rank must be 1..3");
    std::vector<char> bytes(16 + volume.size() * 4);
    std::memcpy(bytes.data(), "DRV1", 4);
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t n = a < volume.dims() ? static_cast<std::uint32_t>(volume.shape[a]) : 1u;
        write_le<std::uint32_t>(bytes.data() + 4 + 4 * a, n);
    }
    for (std::size_t i = 0; i < volume.size(); ++i)
        write_le<float>(bytes.data() + 16 + 4 * i, static_cast<float>(volume.data[i]));
    write_file_bytes(path, bytes);
}

ScalarVolume read_raw(const std::string& path) {
    const std::vector<char> bytes = read_file_bytes(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "DRV1", 4) != 0)
        throw FormatError("'" + path + "': bad DRV1 magic");
    Shape shape;
    for (int a = 0; a < 3; ++a)
        shape.push_back(static_cast<int>(read_le<std::uint32_t>(bytes.data() + 4 + 4 * a)));
    while (shape.size() > 1 && shape.back() == 1) shape.pop_back();
    const std::size_t n = voxel_count(shape);
    if (bytes.size() != 16 + n * 4)
        throw FormatError("'" + path + "': payload length does not match dims (" +
                          std::to_string(bytes.size() - 16) + " bytes for " + std::to_string(n) +
                          " voxels)");
    ScalarVolume out(shape);
    for (std::size_t i = 0; i < n; ++i)
        out.data[i] = read_le<float>(bytes.data() + 16 + 4 * i);
    return out;
}

void write_raw_field(const std::string& prefix, const VectorField& field) {
    for (int c = 0; c < field.channels; ++c) {
        ScalarVolume plane(field.shape);
        std::copy(field.channel(c), field.channel(c) + field.voxels(), plane.data.begin());
        write_raw(prefix + "_c" + std::to_string(c) + ".drv", plane);
    }
}

VectorField read_raw_field(const std::string& prefix, int channels) {
    VectorField out;
    for (int c = 0; c < channels; ++c) {
        const ScalarVolume plane = read_raw(prefix + "_c" + std::to_string(c) + ".drv");
        if (c == 0) out = VectorField(plane.shape, channels);
        require(same_shape(plane.shape, out.shape), "read_raw_field: channel shapes differ");
        std::copy(plane.data.begin(), plane.data.end(), out.channel(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// PGM snapshots

void write_slice_snapshot(const std::string& path, const ScalarVolume& volume, int axis) {
    const int d = volume.dims();
    require(d == 2 || d == 3, "write_slice_snapshot: need a 2D or 3D volume");

    int width, height;
    int ax_w, ax_h, ax_slice = -1;
    if (d == 2) {
        ax_h = 0;
        ax_w = 1;
    } else {
        require(axis >= 0 && axis < 3, "write_slice_snapshot: axis out of range");
        ax_slice = axis;
        const int others[2] = {axis == 0 ? 1 : 0, axis == 2 ? 1 : 2};
        ax_w = others[0];
        ax_h = others[1];
    }
    width = volume.shape[ax_w];
    height = volume.shape[ax_h];

    double lo = volume.data.empty() ? 0.0 : volume.data[0];
    double hi = lo;
    for (double v : volume.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;

    const auto strides = row_major_strides(volume.shape);
    std::ostringstream head;
    head << "P5\n" << width << " " << height << "\n255\n";
    std::vector<char> bytes(head.str().begin(), head.str().end());
    for (int j = 0; j < height; ++j)
        for (int i = 0; i < width; ++i) {
            std::size_t idx = static_cast<std::size_t>(i) * strides[ax_w] +
                              static_cast<std::size_t>(j) * strides[ax_h];
            if (ax_slice >= 0)
                idx += static_cast<std::size_t>(volume.shape[ax_slice] / 2) * strides[ax_slice];
            const int g = static_cast<int>(std::lround((volume.data[idx] - lo) * scale));
            bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(g, 0, 255))));
        }
    write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// config

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto first = s.find_first_not_of(" \t\r");
        const auto last = s.find_last_not_of(" \t\r");
        if (first == std::string::npos) return std::string();
        return s.substr(first, last - first + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw Error("config line " + std::to_string(lineno) + ": empty key");
        out[key] = value;
    }
    return out;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw Error("cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

const std::string* ConfigView::lookup(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    consumed_.insert(key);
    return &it->second;
}

double ConfigView::get_double(const std::string& key, double fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t pos = 0;
        const double parsed = std::stod(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("");
        return parsed;
    } catch (...) {
        throw Error("config key '" + key + "': cannot parse '" + *v + "' as a real number");
    }
}

int ConfigView::get_int(const std::string& key, int fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t pos = 0;
        const long parsed = std::stol(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("");
        return static_cast<int>(parsed);
    } catch (...) {
        throw Error("config key '" + key + "': cannot parse '" + *v + "' as an integer");
    }
}

std::uint64_t ConfigView::get_u64(const std::string& key, std::uint64_t fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t pos = 0;
        const unsigned long long parsed = std::stoull(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("");
        return parsed;
    } catch (...) {
        throw Error("config key '" + key + "': cannot parse '" + *v + "' as an unsigned integer");
    }
}

std::string ConfigView::get_string(const std::string& key, const std::string& fallback) {
    const std::string* v = lookup(key);
    return v ? *v : fallback;
}

Shape ConfigView::get_shape(const std::string& key, const Shape& fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    Shape shape;
    std::string token;
    std::istringstream in(*v);
    std::string normalized = *v;
    for (char& ch : normalized)
        if (ch == ',' || ch == 'x') ch = ' ';
    std::istringstream nin(normalized);
    while (nin >> token) {
        try {
            shape.push_back(std::stoi(token));
        } catch (...) {
            throw Error("config key '" + key + "': cannot parse '" + *v + "' as dimensions");
        }
    }
    if (shape.empty() || shape.size() > kMaxDims)
        throw Error("config key '" + key + "': expected 1-3 dimensions");
    return shape;
}

void ConfigView::finish() const {
    for (const auto& [key, value] : entries_)
        if (!consumed_.count(key)) throw Error("unknown config key '" + key + "'");
}

// ---------------------------------------------------------------------------
// CSV formatting

std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", value);
    return buf;
}

// ---------------------------------------------------------------------------
// case persistence

namespace {

ScalarVolume labels_as_volume(const LabelVolume& labels) {
    ScalarVolume out(labels.shape);
    for (std::size_t i = 0; i < labels.size(); ++i) out.data[i] = labels.data[i];
    return out;
}

LabelVolume volume_as_labels(const ScalarVolume& vol) {
    LabelVolume out(vol.shape);
    for (std::size_t i = 0; i < vol.size(); ++i)
        out.data[i] = static_cast<int>(std::lround(vol.data[i]));
    out.rebuild_labelset();
    return out;
}

}  // namespace

void save_case(const std::string& dir, const RegistrationCase& c, const SynthSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_raw(dir + "/moving.drv", c.moving);
    write_raw(dir + "/fixed.drv", c.fixed);
    write_raw(dir + "/labels_moving.drv", labels_as_volume(c.labels_moving));
    write_raw(dir + "/labels_fixed.drv", labels_as_volume(c.labels_fixed));
    write_raw_field(dir + "/map_gt", c.map_gt);
    write_raw_field(dir + "/map_gt_inv", c.map_gt_inverse);

    std::ostringstream manifest;
    manifest << "seed = " << c.seed << "\n";
    manifest << "shape =";
    for (int n : c.moving.shape) manifest << " " << n;
    manifest << "\n";
    manifest << "warp_amplitude = " << format_double(spec.warp_amplitude) << "\n";
    manifest << "warp_smoothness = " << format_double(spec.warp_smoothness) << "\n";
    manifest << "n_blobs = " << spec.n_blobs << "\n";
    manifest << "label_count = " << spec.label_count << "\n";
    manifest << "bezier_degree = " << spec.bezier_degree << "\n";
    manifest << "invert_probability = " << format_double(spec.invert_probability) << "\n";
    const std::string text = manifest.str();
    write_file_bytes(dir + "/manifest.txt", std::vector<char>(text.begin(), text.end()));
}

RegistrationCase load_case(const std::string& dir) {
    RegistrationCase c;
    c.moving = read_raw(dir + "/moving.drv");
    c.fixed = read_raw(dir + "/fixed.drv");
    c.labels_moving = volume_as_labels(read_raw(dir + "/labels_moving.drv"));
    c.labels_fixed = volume_as_labels(read_raw(dir + "/labels_fixed.drv"));
    const int d = c.moving.dims();
    c.map_gt = read_raw_field(dir + "/map_gt", d);
    c.map_gt_inverse = read_raw_field(dir + "/map_gt_inv", d);
    ConfigView manifest(parse_config_file(dir + "/manifest.txt"));
    c.seed = manifest.get_u64("seed", 0);
    return c;
}

}  // namespace diffreg
