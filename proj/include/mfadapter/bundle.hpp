#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfadapter/binary_io.hpp"
#include "mfadapter/errors.hpp"
#include "mfadapter/numerics.hpp"
#include "mfadapter/tensor.hpp"

namespace mfa {

/// Layers that carry low-level maps.
inline constexpr int kLayers[] = {3, 4};

inline void require_known_layer(int layer) {
  if (layer != 3 && layer != 4) throw ValidationError("layer must be 3 or 4, got " + std::to_string(layer));
}

struct LayerGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  Shape shape() const { return {channels, height, width}; }
  friend bool operator==(const LayerGeometry&, const LayerGeometry&) = default;
};

/// One encoding of an image: low-level maps per layer plus the global embedding.
struct FeatureView {
  std::map<int, Tensor> low_maps;  // layer → [C × h × w]
  Tensor high;                     // [D]

  friend bool operator==(const FeatureView&, const FeatureView&) = default;
};

struct BundleItem {
  std::string item_id;
  std::size_t label = 0;
  FeatureView features;
  std::vector<FeatureView> augmented_views;

  friend bool operator==(const BundleItem&, const BundleItem&) = default;
};

/// Everything an encoder produced for one dataset.
struct FeatureBundle {
  std::vector<BundleItem> items;
  std::vector<std::string> class_names;
  Tensor text_features;  // [N × D]
  std::string encoder_tag;
  std::map<int, LayerGeometry> geometry;
  std::size_t embed_dim = 0;
  nlohmann::json extra_meta = nlohmann::json::object();

  std::size_t n_classes() const noexcept { return class_names.size(); }

  std::optional<std::size_t> find_item(const std::string& id) const {
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].item_id == id) return i;
    }
    return std::nullopt;
  }

  void validate() const {
    const std::size_t n = class_names.size();
    if (n == 0) throw ValidationError("bundle has no classes");
    if (items.empty()) throw ValidationError("bundle has no items");
    if (embed_dim == 0) throw ValidationError("bundle embedding width is zero");
    if (text_features.shape() != Shape{n, embed_dim}) {
      throw ValidationError("text_features shape " + shape_str(text_features.shape()) + " expected " +
                            shape_str({n, embed_dim}));
    }
    for (const auto& [layer, g] : geometry) {
      require_known_layer(layer);
      if (g.channels == 0 || g.height == 0 || g.width == 0) {
        throw ValidationError("layer " + std::to_string(layer) + " geometry has a zero extent");
      }
    }
    auto check_view = [&](const FeatureView& v, const std::string& id) {
      if (v.high.shape() != Shape{embed_dim}) {
        throw ValidationError("item " + id + ": high feature shape " + shape_str(v.high.shape()));
      }
      if (v.low_maps.size() != geometry.size()) {
        throw ValidationError("item " + id + ": layer set differs from bundle geometry");
      }
      for (const auto& [layer, g] : geometry) {
        auto it = v.low_maps.find(layer);
        if (it == v.low_maps.end() || it->second.shape() != g.shape()) {
          throw ValidationError("item " + id + ": layer " + std::to_string(layer) + " map does not match " +
                                shape_str(g.shape()));
        }
      }
    };
    std::unordered_map<std::string, int> seen;
    for (const auto& item : items) {
      if (item.item_id.empty() || item.item_id.find('/') != std::string::npos) {
        throw ValidationError("item id \"" + item.item_id + "\" must be nonempty and contain no '/'");
      }
      if (seen[item.item_id]++) throw ValidationError("duplicate item id " + item.item_id);
      if (item.label >= n) {
        throw ValidationError("item " + item.item_id + ": label " + std::to_string(item.label) + " out of range");
      }
      check_view(item.features, item.item_id);
      for (const auto& v : item.augmented_views) check_view(v, item.item_id);
    }
  }
};

struct GeometryProfile {
  std::string name;
  std::map<int, LayerGeometry> layers;
  std::size_t embed_dim = 0;
};

/// Stage shapes of the CLIP ResNets at 224×224 input.
inline std::optional<GeometryProfile> geometry_profile(const std::string& backbone) {
  const std::map<int, LayerGeometry> resnet = {{3, {1024, 14, 14}}, {4, {2048, 7, 7}}};
  if (backbone == "RN50") return GeometryProfile{"RN50", resnet, 1024};
  if (backbone == "RN101") return GeometryProfile{"RN101", resnet, 512};
  return std::nullopt;
}

/// Throws ValidationError naming the first mismatch against `profile`.
inline void validate_geometry_profile(const FeatureBundle& bundle, const GeometryProfile& profile) {
  if (bundle.embed_dim != profile.embed_dim) {
    throw ValidationError(profile.name + " profile expects D=" + std::to_string(profile.embed_dim) + ", bundle has " +
                          std::to_string(bundle.embed_dim));
  }
  for (const auto& [layer, g] : profile.layers) {
    auto it = bundle.geometry.find(layer);
    if (it == bundle.geometry.end()) {
      throw ValidationError(profile.name + " profile: bundle lacks layer " + std::to_string(layer));
    }
    if (!(it->second == g)) {
      throw ValidationError(profile.name + " profile: layer " + std::to_string(layer) + " is " +
                            shape_str(it->second.shape()) + ", expected " + shape_str(g.shape()));
    }
  }
}

// ---------------------------------------------------------------------------
// "MFFB" container
//
//   "MFFB" | u32 version | u64 record_count
//   index: record_count × { u32 name_len, name, u64 offset }
//   records at their offsets:
//     u32 name_len, name, u8 kind (0 tensor, 1 blob),
//     tensor: u8 rank, u64 dims[rank], f32 data   |   blob: u64 len, bytes
//
// Record names: "meta" (JSON blob), "text", "labels",
// "item/<id>/low<layer>", "item/<id>/high", and for augmented view k
// "item/<id>/view<k>/low<layer>", "item/<id>/view<k>/high".
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kBundleVersion = 1;

namespace detail {

enum class RecordKind : std::uint8_t { tensor = 0, blob = 1 };

struct PendingRecord {
  std::string name;
  RecordKind kind;
  const Tensor* tensor = nullptr;
  std::string blob;
};

inline void add_view_records(std::vector<PendingRecord>& out, const std::string& prefix, const FeatureView& v) {
  for (const auto& [layer, map] : v.low_maps) {
    out.push_back({prefix + "/low" + std::to_string(layer), RecordKind::tensor, &map, {}});
  }
  out.push_back({prefix + "/high", RecordKind::tensor, &v.high, {}});
}

}  // namespace detail

inline nlohmann::json bundle_meta(const FeatureBundle& b) {
  nlohmann::json meta = b.extra_meta.is_object() ? b.extra_meta : nlohmann::json::object();
  meta["encoder_tag"] = b.encoder_tag;
  meta["class_names"] = b.class_names;
  meta["embed_dim"] = b.embed_dim;
  nlohmann::json geometry = nlohmann::json::object();
  for (const auto& [layer, g] : b.geometry) geometry[std::to_string(layer)] = {g.channels, g.height, g.width};
  meta["geometry"] = geometry;
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : b.items) items.push_back({{"id", it.item_id}, {"views", it.augmented_views.size()}});
  meta["items"] = items;
  return meta;
}

inline io::Bytes encode_bundle(const FeatureBundle& bundle) {
  bundle.validate();
  std::vector<float> labels;
  labels.reserve(bundle.items.size());
  for (const auto& it : bundle.items) labels.push_back(static_cast<float>(it.label));
  const std::size_t n_items = labels.size();
  const Tensor label_tensor({n_items}, std::move(labels));

  std::vector<detail::PendingRecord> records;
  records.push_back({"meta", detail::RecordKind::blob, nullptr, bundle_meta(bundle).dump()});
  records.push_back({"text", detail::RecordKind::tensor, &bundle.text_features, {}});
  records.push_back({"labels", detail::RecordKind::tensor, &label_tensor, {}});
  for (const auto& it : bundle.items) {
    const std::string prefix = "item/" + it.item_id;
    detail::add_view_records(records, prefix, it.features);
    for (std::size_t k = 0; k < it.augmented_views.size(); ++k) {
      detail::add_view_records(records, prefix + "/view" + std::to_string(k), it.augmented_views[k]);
    }
  }

  io::ByteWriter w;
  w.magic("MFFB");
  w.u32(kBundleVersion);
  w.u64(records.size());
  std::vector<std::size_t> offset_slots;
  for (const auto& r : records) {
    w.str(r.name);
    offset_slots.push_back(w.size());
    w.u64(0);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    w.patch_u64(offset_slots[i], w.size());
    const auto& r = records[i];
    w.str(r.name);
    w.u8(static_cast<std::uint8_t>(r.kind));
    if (r.kind == detail::RecordKind::tensor) {
      w.tensor_body(*r.tensor);
    } else {
      w.blob(r.blob);
    }
  }
  return std::move(w).bytes();
}

/// Hash of the encoded bundle; equal bundles give equal checksums.
inline std::uint64_t bundle_checksum(const FeatureBundle& bundle) {
  Checksum h;
  h.update(std::span<const std::uint8_t>(encode_bundle(bundle)));
  return h.value();
}

namespace detail {

class BundleDecoder {
 public:
  explicit BundleDecoder(std::span<const std::uint8_t> bytes) : r_(bytes) {
    r_.expect_magic("MFFB");
    const std::uint64_t version_at = r_.offset();
    const std::uint32_t version = r_.u32();
    if (version != kBundleVersion) {
      throw FormatError("unsupported bundle version " + std::to_string(version), version_at);
    }
    const std::uint64_t count_at = r_.offset();
    const std::uint64_t count = r_.u64();
    if (count > r_.remaining() / 12) throw FormatError("record count exceeds file size", count_at);
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint64_t entry_at = r_.offset();
      std::string name = r_.str();
      const std::uint64_t offset = r_.u64();
      if (!index_.emplace(std::move(name), offset).second) throw FormatError("duplicate record name", entry_at);
    }
  }

  std::string blob(const std::string& name) {
    seek_record(name, RecordKind::blob);
    return r_.blob();
  }

  std::pair<Tensor, std::uint64_t> tensor(const std::string& name) {
    seek_record(name, RecordKind::tensor);
    const std::uint64_t at = r_.offset();
    return {r_.tensor_body(), at};
  }

 private:
  void seek_record(const std::string& name, RecordKind kind) {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("missing record \"" + name + "\"", r_.offset());
    r_.seek(it->second);
    const std::uint64_t at = r_.offset();
    if (r_.str() != name) throw FormatError("record name disagrees with index for \"" + name + "\"", at);
    const std::uint64_t kind_at = r_.offset();
    if (r_.u8() != static_cast<std::uint8_t>(kind)) {
      throw FormatError("record \"" + name + "\" has the wrong kind", kind_at);
    }
  }

  io::ByteReader r_;
  std::unordered_map<std::string, std::uint64_t> index_;
};

}  // namespace detail

inline FeatureBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  detail::BundleDecoder dec(bytes);
  FeatureBundle b;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(dec.blob("meta"));
    b.encoder_tag = meta.at("encoder_tag").get<std::string>();
    b.class_names = meta.at("class_names").get<std::vector<std::string>>();
    b.embed_dim = meta.at("embed_dim").get<std::size_t>();
    for (const auto& [key, dims] : meta.at("geometry").items()) {
      const auto v = dims.get<std::vector<std::size_t>>();
      if (v.size() != 3) throw FormatError("layer geometry must have three extents", 0);
      b.geometry[std::stoi(key)] = LayerGeometry{v[0], v[1], v[2]};
    }
    for (const auto& it : meta.at("items")) {
      BundleItem item;
      item.item_id = it.at("id").get<std::string>();
      item.augmented_views.resize(it.at("views").get<std::size_t>());
      b.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed meta blob: ") + e.what(), 0);
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed meta blob: ") + e.what(), 0);
  }
  b.extra_meta = meta;
  for (const char* key : {"encoder_tag", "class_names", "embed_dim", "geometry", "items"}) b.extra_meta.erase(key);

  auto expect_shape = [](const std::pair<Tensor, std::uint64_t>& rec, const Shape& shape, const std::string& name) {
    if (rec.first.shape() != shape) {
      throw FormatError("record \"" + name + "\" has shape " + shape_str(rec.first.shape()) + ", expected " +
                            shape_str(shape),
                        rec.second);
    }
    if (!rec.first.all_finite()) throw FormatError("record \"" + name + "\" holds non-finite values", rec.second);
    return rec.first;
  };
  const std::size_t n = b.class_names.size();
  if (n == 0 || b.embed_dim == 0 || b.items.empty()) throw FormatError("bundle meta declares an empty bundle", 0);
  b.text_features = expect_shape(dec.tensor("text"), {n, b.embed_dim}, "text");
  const Tensor labels = expect_shape(dec.tensor("labels"), {b.items.size()}, "labels");

  auto read_view = [&](const std::string& prefix) {
    FeatureView v;
    for (const auto& [layer, g] : b.geometry) {
      const std::string name = prefix + "/low" + std::to_string(layer);
      v.low_maps[layer] = expect_shape(dec.tensor(name), g.shape(), name);
    }
    v.high = expect_shape(dec.tensor(prefix + "/high"), {b.embed_dim}, prefix + "/high");
    return v;
  };
  for (std::size_t i = 0; i < b.items.size(); ++i) {
    auto& item = b.items[i];
    const float lab = labels[i];
    if (!(lab >= 0.0f) || lab >= static_cast<float>(n) || std::floor(lab) != lab) {
      throw FormatError("label of item " + item.item_id + " is not a class index", 0);
    }
    item.label = static_cast<std::size_t>(lab);
    const std::string prefix = "item/" + item.item_id;
    item.features = read_view(prefix);
    for (std::size_t k = 0; k < item.augmented_views.size(); ++k) {
      item.augmented_views[k] = read_view(prefix + "/view" + std::to_string(k));
    }
  }
  try {
    b.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("inconsistent bundle: ") + e.what(), 0);
  }
  return b;
}

inline void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& path) {
  io::write_file(path, encode_bundle(bundle));
}

inline FeatureBundle read_bundle(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_bundle(bytes);
}

// ---------------------------------------------------------------------------
// Split manifest: a JSON object mapping item id to "support" or "test".
// ---------------------------------------------------------------------------

enum class Split { support, test };

using SplitManifest = std::map<std::string, Split>;

inline std::string to_string(Split s) { return s == Split::support ? "support" : "test"; }

inline std::string manifest_to_json(const SplitManifest& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, split] : m) j[id] = to_string(split);
  return j.dump(2) + "\n";
}

inline SplitManifest manifest_from_json(const std::string& text) {
  SplitManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ValidationError("split manifest must be a JSON object");
    for (const auto& [id, tag] : j.items()) {
      const auto t = tag.get<std::string>();
      if (t == "support") {
        m[id] = Split::support;
      } else if (t == "test") {
        m[id] = Split::test;
      } else {
        throw ValidationError("unknown split tag \"" + t + "\" for item " + id);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed split manifest: ") + e.what());
  }
  return m;
}

inline void write_manifest(const SplitManifest& m, const std::filesystem::path& path) {
  io::write_text_file(path, manifest_to_json(m));
}

inline SplitManifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return manifest_from_json(std::string(bytes.begin(), bytes.end()));
}

}  // namespace mfa
