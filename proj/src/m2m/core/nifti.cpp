#include "m2m/core/nifti.h"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace m2m {

namespace {

// NIfTI-1 header, 348 bytes. Field order and sizes follow the standard; the
// layout has no padding on common ABIs and is asserted below.
#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;

constexpr char kRawMagic[16] = {'M', '2', 'M', 'R', 'E', 'G', 'R', 'A',
                                'W', 'V', 'O', 'L', 0, 0, 0, 0};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_gz(const std::string& path) { return ends_with(path, ".gz"); }
bool is_rvol(const std::string& path) { return ends_with(path, ".rvol"); }

std::vector<char> read_file_bytes(const std::string& path) {
    if (is_gz(path)) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
        std::vector<char> out;
        char buf[1 << 16];
        int n;
        while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
        bool bad = n < 0;
        gzclose(f);
        if (bad) throw std::runtime_error("gzip read failed for '" + path + "'");
        return out;
    }
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
    f.seekg(0, std::ios::end);
    std::streamoff len = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<char> out(static_cast<std::size_t>(len), '\0');
    if (len > 0) f.read(out.data(), len);
    if (!f) throw std::runtime_error("short read on '" + path + "'");
    return out;
}

void write_file_bytes(const std::string& path, const void* data, std::size_t len) {
    if (is_gz(path)) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
        const char* p = static_cast<const char*>(data);
        std::size_t off = 0;
        while (off < len) {
            unsigned chunk = unsigned(std::min<std::size_t>(len - off, 1u << 20));
            if (gzwrite(f, p + off, chunk) != int(chunk)) {
                gzclose(f);
                throw std::runtime_error("gzip write failed for '" + path + "'");
            }
            off += chunk;
        }
        gzclose(f);
        return;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(static_cast<const char*>(data), std::streamsize(len));
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

struct ParsedNifti {
    Nifti1Header hdr;
    std::vector<double> values;  // after scl_slope/scl_inter
    Shape3 shape;
    int components = 1;  // dim[5] when dim[0] == 5
};

ParsedNifti parse_nifti(const std::string& path, bool allow_vector) {
    std::vector<char> bytes = read_file_bytes(path);
    if (bytes.size() < sizeof(Nifti1Header))
        throw std::runtime_error("'" + path + "': file shorter than a NIfTI-1 header");

    ParsedNifti p;
    std::memcpy(&p.hdr, bytes.data(), sizeof(Nifti1Header));
    const Nifti1Header& h = p.hdr;

    if (h.sizeof_hdr != 348) {
        if (h.sizeof_hdr == 1543569408)  // 348 byte-swapped
            throw std::runtime_error("'" + path + "': big-endian NIfTI is not supported (sizeof_hdr is byte-swapped)");
        throw std::runtime_error("'" + path + "': sizeof_hdr is " + std::to_string(h.sizeof_hdr) +
                                 ", expected 348");
    }
    if (std::strncmp(h.magic, "n+1", 4) != 0)
        throw std::runtime_error("'" + path + "': magic is not \"n+1\" (two-file NIfTI and ANALYZE are not supported)");

    int ndim = h.dim[0];
    bool vector_field = false;
    if (ndim == 3) {
        // scalar
    } else if (ndim == 4 && h.dim[4] == 1) {
        // a degenerate 4th axis is tolerated
    } else if (allow_vector && ndim == 5 && h.dim[4] == 1 && h.dim[5] == 3) {
        vector_field = true;
    } else {
        throw std::runtime_error("'" + path + "': dim[0] is " + std::to_string(ndim) +
                                 (allow_vector ? ", expected 3 (scalar) or 5 with dim=[5,X,Y,Z,1,3] (vector)"
                                               : ", expected a 3-dimensional scalar volume"));
    }
    for (int a = 1; a <= 3; ++a)
        if (h.dim[a] <= 0)
            throw std::runtime_error("'" + path + "': dim[" + std::to_string(a) + "] is " +
                                     std::to_string(h.dim[a]) + ", expected positive");
    p.shape = {h.dim[1], h.dim[2], h.dim[3]};
    p.components = vector_field ? 3 : 1;

    std::size_t n = std::size_t(p.shape[0]) * p.shape[1] * p.shape[2] * p.components;
    std::size_t offset = std::size_t(h.vox_offset);
    if (offset < 348) offset = 352;

    int bytes_per;
    switch (h.datatype) {
        case kDtUint8: bytes_per = 1; break;
        case kDtInt16: bytes_per = 2; break;
        case kDtFloat32: bytes_per = 4; break;
        case kDtFloat64: bytes_per = 8; break;
        default:
            throw std::runtime_error("'" + path + "': datatype " + std::to_string(h.datatype) +
                                     " is not supported (uint8, int16, float32, float64 only)");
    }
    if (bytes.size() < offset + n * bytes_per)
        throw std::runtime_error("'" + path + "': payload truncated (need " +
                                 std::to_string(offset + n * bytes_per) + " bytes, have " +
                                 std::to_string(bytes.size()) + ")");

    double slope = h.scl_slope == 0.0f ? 1.0 : double(h.scl_slope);
    double inter = h.scl_slope == 0.0f ? 0.0 : double(h.scl_inter);

    p.values.resize(n);
    const char* payload = bytes.data() + offset;
    switch (h.datatype) {
        case kDtUint8: {
            const uint8_t* src = reinterpret_cast<const uint8_t*>(payload);
            for (std::size_t i = 0; i < n; ++i) p.values[i] = slope * double(src[i]) + inter;
            break;
        }
        case kDtInt16: {
            const int16_t* src = reinterpret_cast<const int16_t*>(payload);
            for (std::size_t i = 0; i < n; ++i) p.values[i] = slope * double(src[i]) + inter;
            break;
        }
        case kDtFloat32: {
            const float* src = reinterpret_cast<const float*>(payload);
            for (std::size_t i = 0; i < n; ++i) p.values[i] = slope * double(src[i]) + inter;
            break;
        }
        case kDtFloat64: {
            const double* src = reinterpret_cast<const double*>(payload);
            for (std::size_t i = 0; i < n; ++i) p.values[i] = slope * double(src[i]) + inter;
            break;
        }
    }
    return p;
}

Nifti1Header make_header(const Shape3& shape, const std::array<double, 3>& spacing,
                         int16_t datatype, int16_t bitpix, int components,
                         const OrientationMeta& meta) {
    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    if (components == 1) {
        h.dim[0] = 3;
        h.dim[1] = int16_t(shape[0]);
        h.dim[2] = int16_t(shape[1]);
        h.dim[3] = int16_t(shape[2]);
        h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
    } else {
        h.dim[0] = 5;
        h.dim[1] = int16_t(shape[0]);
        h.dim[2] = int16_t(shape[1]);
        h.dim[3] = int16_t(shape[2]);
        h.dim[4] = 1;
        h.dim[5] = int16_t(components);
        h.dim[6] = h.dim[7] = 1;
        h.intent_code = 1007;  // NIFTI_INTENT_VECTOR
    }
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = float(spacing[0]);
    h.pixdim[2] = float(spacing[1]);
    h.pixdim[3] = float(spacing[2]);
    h.pixdim[4] = h.pixdim[5] = h.pixdim[6] = h.pixdim[7] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // NIFTI_UNITS_MM
    h.qform_code = meta.qform_code;
    h.sform_code = meta.sform_code;
    h.quatern_b = meta.quatern[0];
    h.quatern_c = meta.quatern[1];
    h.quatern_d = meta.quatern[2];
    h.qoffset_x = meta.quatern[3];
    h.qoffset_y = meta.quatern[4];
    h.qoffset_z = meta.quatern[5];
    std::memcpy(h.srow_x, meta.srow.data() + 0, 4 * sizeof(float));
    std::memcpy(h.srow_y, meta.srow.data() + 4, 4 * sizeof(float));
    std::memcpy(h.srow_z, meta.srow.data() + 8, 4 * sizeof(float));
    std::memcpy(h.magic, "n+1", 4);
    return h;
}

void write_nifti(const std::string& path, const Nifti1Header& h, const void* payload,
                 std::size_t payload_bytes) {
    std::vector<char> bytes(352 + payload_bytes, 0);
    std::memcpy(bytes.data(), &h, sizeof(h));
    std::memcpy(bytes.data() + 352, payload, payload_bytes);
    write_file_bytes(path, bytes.data(), bytes.size());
}

OrientationMeta meta_from_header(const Nifti1Header& h) {
    OrientationMeta m;
    m.qform_code = h.qform_code;
    m.sform_code = h.sform_code;
    m.quatern = {h.quatern_b, h.quatern_c, h.quatern_d, h.qoffset_x, h.qoffset_y, h.qoffset_z};
    std::memcpy(m.srow.data() + 0, h.srow_x, 4 * sizeof(float));
    std::memcpy(m.srow.data() + 4, h.srow_y, 4 * sizeof(float));
    std::memcpy(m.srow.data() + 8, h.srow_z, 4 * sizeof(float));
    return m;
}

Volume load_rvol(const std::string& path) {
    std::vector<char> bytes = read_file_bytes(path);
    if (bytes.size() < 16 + 12 + 12)
        throw std::runtime_error("'" + path + "': file shorter than an .rvol header");
    if (std::memcmp(bytes.data(), kRawMagic, 16) != 0)
        throw std::runtime_error("'" + path + "': bad .rvol magic");
    uint32_t dims[3];
    float sp[3];
    std::memcpy(dims, bytes.data() + 16, 12);
    std::memcpy(sp, bytes.data() + 28, 12);
    for (int a = 0; a < 3; ++a)
        if (dims[a] == 0 || dims[a] > (1u << 24))
            throw std::runtime_error("'" + path + "': bad .rvol dimension " + std::to_string(dims[a]));
    Shape3 shape = {int(dims[0]), int(dims[1]), int(dims[2])};
    std::size_t n = std::size_t(dims[0]) * dims[1] * dims[2];
    if (bytes.size() < 40 + 4 * n)
        throw std::runtime_error("'" + path + "': .rvol payload truncated");
    Volume vol(shape);
    vol.spacing = {double(sp[0]), double(sp[1]), double(sp[2])};
    const float* src = reinterpret_cast<const float*>(bytes.data() + 40);
    for (std::size_t i = 0; i < n; ++i) vol.values.data[i] = double(src[i]);
    vol.validate();
    return vol;
}

void save_rvol(const Volume& vol, const std::string& path) {
    std::size_t n = vol.voxels();
    std::vector<char> bytes(40 + 4 * n);
    std::memcpy(bytes.data(), kRawMagic, 16);
    uint32_t dims[3] = {uint32_t(vol.shape()[0]), uint32_t(vol.shape()[1]), uint32_t(vol.shape()[2])};
    float sp[3] = {float(vol.spacing[0]), float(vol.spacing[1]), float(vol.spacing[2])};
    std::memcpy(bytes.data() + 16, dims, 12);
    std::memcpy(bytes.data() + 28, sp, 12);
    float* dst = reinterpret_cast<float*>(bytes.data() + 40);
    for (std::size_t i = 0; i < n; ++i) dst[i] = float(vol.values.data[i]);
    write_file_bytes(path, bytes.data(), bytes.size());
}

}  // namespace

Volume load_volume(const std::string& path) {
    if (is_rvol(path)) return load_rvol(path);
    ParsedNifti p = parse_nifti(path, /*allow_vector=*/false);
    Volume vol(p.shape);
    vol.spacing = {double(p.hdr.pixdim[1]), double(p.hdr.pixdim[2]), double(p.hdr.pixdim[3])};
    for (int a = 0; a < 3; ++a)
        if (!(vol.spacing[a] > 0.0)) vol.spacing[a] = 1.0;  // pixdim 0 is common in synthetic files
    vol.meta = meta_from_header(p.hdr);
    vol.values.data = std::move(p.values);
    vol.validate();
    return vol;
}

void save_volume(const Volume& vol, const std::string& path) {
    vol.validate();
    if (is_rvol(path)) {
        save_rvol(vol, path);
        return;
    }
    Nifti1Header h = make_header(vol.shape(), vol.spacing, kDtFloat32, 32, 1, vol.meta);
    std::vector<float> payload(vol.voxels());
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = float(vol.values.data[i]);
    write_nifti(path, h, payload.data(), payload.size() * sizeof(float));
}

LabelVolume load_labels(const std::string& path) {
    ParsedNifti p = parse_nifti(path, /*allow_vector=*/false);
    LabelVolume labels;
    labels.shape = p.shape;
    labels.data.resize(p.values.size());
    int max_class = 0;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        double v = p.values[i];
        double r = std::round(v);
        if (std::abs(v - r) > 1e-6 || r < 0.0 || r > 255.0)
            throw std::runtime_error("'" + path + "': voxel value " + std::to_string(v) +
                                     " is not a class id in [0,255]");
        labels.data[i] = uint8_t(r);
        max_class = std::max(max_class, int(r));
    }
    labels.n_classes = max_class + 1;
    return labels;
}

void save_labels(const LabelVolume& labels, const std::string& path) {
    labels.validate();
    if (labels.n_classes > 256)
        throw std::runtime_error("save_labels: more than 256 classes cannot be written as uint8");
    OrientationMeta meta;
    Nifti1Header h = make_header(labels.shape, {1.0, 1.0, 1.0}, kDtUint8, 8, 1, meta);
    write_nifti(path, h, labels.data.data(), labels.data.size());
}

Grid<double> load_field(const std::string& path) {
    ParsedNifti p = parse_nifti(path, /*allow_vector=*/true);
    if (p.components != 3)
        throw std::runtime_error("'" + path + "': expected a 3-component vector field");
    Grid<double> field(p.shape, 3);
    field.data = std::move(p.values);
    return field;
}

void save_field(const Grid<double>& field, const std::string& path) {
    if (field.channels != 3)
        throw std::invalid_argument("save_field: field must have 3 channels, got " +
                                    std::to_string(field.channels));
    OrientationMeta meta;
    Nifti1Header h = make_header(field.shape, {1.0, 1.0, 1.0}, kDtFloat32, 32, 3, meta);
    std::vector<float> payload(field.data.size());
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = float(field.data[i]);
    write_nifti(path, h, payload.data(), payload.size() * sizeof(float));
}

}  // namespace m2m
