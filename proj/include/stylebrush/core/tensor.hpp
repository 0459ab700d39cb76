#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stylebrush/core/error.hpp"
#include "stylebrush/core/rng.hpp"

namespace stylebrush {

using Shape = std::vector<int>;

/// 64-byte aligned storage. Vectorised kernels take different reduction
/// paths depending on base alignment, so a fixed alignment keeps results
/// bit-identical from one allocation to the next.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major tensor with value semantics.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {
        for (int d : shape_) require(d >= 0, ErrorKind::shape, "negative tensor dimension");
    }

    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(data_.size() == numel(shape_), ErrorKind::shape,
                "tensor data size " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
    }

    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

    Tensor(Shape shape, std::initializer_list<T> data) : Tensor(std::move(shape), AlignedVector<T>(data)) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() & noexcept { return data_; }
    std::span<const T> values() const& noexcept { return data_; }
    std::span<const T> values() && = delete;  // would dangle
    AlignedVector<T>& storage() noexcept { return data_; }
    const AlignedVector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    template <class... Idx>
    T& at(Idx... idx) {
        return data_[offset(idx...)];
    }
    template <class... Idx>
    const T& at(Idx... idx) const {
        return data_[offset(idx...)];
    }

    Tensor reshaped(Shape shape) const {
        require(numel(shape) == size(), ErrorKind::shape,
                "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Slice [begin, end) of the leading axis.
    Tensor batch_slice(int begin, int end) const {
        require(rank() >= 1 && 0 <= begin && begin <= end && end <= shape_[0], ErrorKind::shape, "bad batch slice");
        Shape s = shape_;
        s[0] = end - begin;
        const std::size_t inner = size() / static_cast<std::size_t>(std::max(shape_[0], 1));
        return Tensor(s, AlignedVector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                                        data_.begin() + static_cast<std::ptrdiff_t>(end * inner)));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    template <class... Idx>
    std::size_t offset(Idx... idx) const {
        const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
        std::size_t off = 0;
        for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * static_cast<std::size_t>(shape_[i]) + ids[i];
        return off;
    }

    Shape shape_;
    AlignedVector<T> data_;
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    require(a.shape() == b.shape(), ErrorKind::shape,
            std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

/// Concatenate along the leading axis.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> parts) {
    require(!parts.empty(), ErrorKind::shape, "stack_batch of nothing");
    Shape s = parts.front().shape();
    int n = 0;
    AlignedVector<T> data;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        require(ps.size() == s.size() && std::equal(ps.begin() + 1, ps.end(), s.begin() + 1), ErrorKind::shape,
                "stack_batch: ragged shapes");
        n += ps[0];
        data.insert(data.end(), p.storage().begin(), p.storage().end());
    }
    s[0] = n;
    return Tensor<T>(s, std::move(data));
}

/// Adds a leading axis of size one.
template <class T>
Tensor<T> unsqueeze0(const Tensor<T>& t) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    return t.reshaped(s);
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
double mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mean_squared_error");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

/// Content hash of shape and raw element bytes.
template <class T>
std::uint64_t checksum(const Tensor<T>& t, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (int d : t.shape()) h = fnv1a64(&d, sizeof d, h);
    return fnv1a64(t.data(), t.size() * sizeof(T), h);
}

}  // namespace stylebrush
