#pragma once

#include <map>
#include <set>
#include <string>

#include "diffreg/synth.hpp"
#include "diffreg/types.hpp"

namespace diffreg {

// ---- NIfTI-1 (uncompressed single-file, little-endian, magic "n+1") ----

struct NiftiVolume {
    ScalarVolume volume;
    std::vector<char> header;  // bytes [0, vox_offset), preserved verbatim
    int datatype = 0;          // source datatype code
};

/// Reads uint8/int16/int32/float32/float64 payloads; scl_slope/scl_inter are
/// applied when the slope is nonzero. The affine is preserved but unused.
NiftiVolume read_nifti(const std::string& path);

/// Writes a float32 scalar volume. When a passthrough header is supplied its
/// out-of-scope bytes are kept verbatim and only dims, datatype and scaling
/// are patched.
void write_nifti(const std::string& path, const ScalarVolume& volume,
                 const std::vector<char>* passthrough_header = nullptr);

LabelVolume read_nifti_labels(const std::string& path);
/// Labels are written as uint8 when they fit, int16 otherwise.
void write_nifti_labels(const std::string& path, const LabelVolume& labels);

// ---- DRV1 raw fallback: 16-byte header (magic "DRV1" + three uint32 dims),
//      float32 payload, bit-exact round trip ----

void write_raw(const std::string& path, const ScalarVolume& volume);
ScalarVolume read_raw(const std::string& path);

/// Vector fields as one DRV1 file per channel: <prefix>_c0.drv, ...
void write_raw_field(const std::string& prefix, const VectorField& field);
VectorField read_raw_field(const std::string& prefix, int channels);

// ---- PGM (P5) mid-slice snapshots, min/max mapped to 0/255 ----

void write_slice_snapshot(const std::string& path, const ScalarVolume& volume, int axis);

// ---- flat `key = value` config files with '#' comments ----

std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> parse_config_file(const std::string& path);

/// Typed accessor that records which keys were read; finish() rejects any
/// unknown key by name (strict parsing).
class ConfigView {
public:
    explicit ConfigView(std::map<std::string, std::string> entries) : entries_(std::move(entries)) {}

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    double get_double(const std::string& key, double fallback);
    int get_int(const std::string& key, int fallback);
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
    std::string get_string(const std::string& key, const std::string& fallback);
    Shape get_shape(const std::string& key, const Shape& fallback);

    /// Throws naming the first key that was never consumed.
    void finish() const;

private:
    const std::string* lookup(const std::string& key);
    std::map<std::string, std::string> entries_;
    std::set<std::string> consumed_;
};

// ---- CSV helpers (deterministic formatting) ----

std::string format_double(double value);

// ---- synthetic case persistence (DRV volumes + text manifest) ----

void save_case(const std::string& dir, const RegistrationCase& c, const SynthSpec& spec);
RegistrationCase load_case(const std::string& dir);

}  // namespace diffreg
