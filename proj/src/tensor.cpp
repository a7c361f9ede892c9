#include "qseg/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "qseg/error.hpp"

namespace qseg {

namespace {

std::size_t checked_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        require(e > 0, "bad_shape", "tensor extents must be positive, got " + shape_string(shape));
        n *= static_cast<size_t>(e);
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
    data_.assign(checked_size(shape_), fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
    require(checked_size(shape_) == values.size(), "bad_shape",
            "value count " + std::to_string(values.size()) + " does not match shape " +
                shape_string(shape_));
    data_ = std::move(values);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(double value) {
    data_.assign(data_.size(), value);
}

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

void save_tensor(const Tensor& t, const std::string& path, Precision prec) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "io", "cannot open '" + path + "' for writing");
    out << "v1 " << t.rank();
    for (int e : t.shape()) out << " " << e;
    out << " " << (prec == Precision::f64 ? "f64" : "f32") << "\n";
    if (prec == Precision::f64) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
        std::vector<float> narrow(t.size());
        for (size_t i = 0; i < t.size(); ++i) narrow[i] = static_cast<float>(t[i]);
        out.write(reinterpret_cast<const char*>(narrow.data()),
                  static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    }
    require(out.good(), "io", "short write to '" + path + "'");
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "io", "cannot open '" + path + "' for reading");
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic, precision;
    int rank = 0;
    hs >> magic >> rank;
    require(magic == "v1" && rank >= 1 && rank <= 8, "bad_format",
            "unrecognized tensor header in '" + path + "'");
    std::vector<int> shape(static_cast<size_t>(rank));
    for (int& e : shape) hs >> e;
    hs >> precision;
    require(!hs.fail() && (precision == "f64" || precision == "f32"), "bad_format",
            "unrecognized tensor header in '" + path + "'");

    Tensor t(shape);
    if (precision == "f64") {
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
        std::vector<float> narrow(t.size());
        in.read(reinterpret_cast<char*>(narrow.data()),
                static_cast<std::streamsize>(narrow.size() * sizeof(float)));
        for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(narrow[i]);
    }
    require(in.good(), "io", "short read from '" + path + "'");
    return t;
}

}  // namespace qseg
