#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace i2p {

enum class DataErrorKind {
    MissingFile,
    MalformedJson,
    UnknownDistressType,
    UnknownSeverity,
    InvalidPolygon,
    SelfIntersectingPolygon,
    OutOfBounds,
    NonPositiveFootprint,
    DuplicateImageId,
    MissingSeverity,
};

std::string to_string(DataErrorKind kind);

// Ingestion / labeling failure tied to a specific image and annotation index.
// `annotation_index` is npos when the failure concerns the whole file.
class DataError : public std::runtime_error {
public:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    DataError(DataErrorKind kind, std::string image_id, std::size_t annotation_index, const std::string& detail);

    DataErrorKind kind() const noexcept { return kind_; }
    const std::string& image_id() const noexcept { return image_id_; }
    std::size_t annotation_index() const noexcept { return index_; }

private:
    DataErrorKind kind_;
    std::string image_id_;
    std::size_t index_;
};

// Invalid curve set, thresholds file, network config or training config.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace i2p
