#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgan/dmn/dmn.hpp"
#include "maskgan/eval/eval.hpp"
#include "maskgan/mask/mask.hpp"

namespace maskgan::serve {

/// Request-level failure carrying the HTTP status it maps to.
struct ServeError : std::runtime_error {
    ServeError(int status, const std::string& message, std::int64_t bad_pixels = -1)
        : std::runtime_error(message), status(status), bad_pixels(bad_pixels) {}
    int status;
    std::int64_t bad_pixels;  // invalid mask pixels, -1 when not applicable
};

/// Read-only inference bundle: the DMN from a training checkpoint plus an
/// optional mask parser for image-only uploads.
struct Model {
    CategoryPalette palette = CategoryPalette::default_palette();
    dmn::DenseMappingNetwork net;
    std::optional<eval::SegmentationNet> parser;
    int resolution() const { return net.config().resolution; }
};

/// Throws CheckpointError when the checkpoint is unreadable.
std::shared_ptr<const Model> load_model(const std::filesystem::path& ckpt,
                                        const std::optional<std::filesystem::path>& parser = std::nullopt);

/// Decodes an upload and brings it to the working resolution. Undecodable
/// bytes raise ServeError 400; a palette mismatch or out-of-range labels
/// raise 422 with the bad pixel count.
ImageTensor decode_upload_image(const std::string& bytes, int resolution);
LabelMask decode_upload_mask(const std::string& bytes, const CategoryPalette& palette, int resolution);

/// Style of one (image, mask) pair, detached.
dmn::StyleParams compute_style(const Model& model, const ImageTensor& image, const LabelMask& mask);
ImageTensor render(const Model& model, const dmn::StyleParams& style, const LabelMask& mask);

/// Single-shot equivalent of create + edit, returning the PNG bytes.
std::string infer_png(const Model& model, const std::string& target_image, const std::string& target_mask,
                      const std::string& source_mask);

struct EditSession {
    std::string id;
    ImageTensor target;
    LabelMask target_mask;
    dmn::StyleParams style;
    std::chrono::system_clock::time_point created;
    std::string initial_render;  // PNG
    std::mutex mutex;            // serializes edits of this session
};

struct CreateResult {
    std::string id;
    LabelMask mask;
    std::string mask_png;
    std::string render_png;
    bool mask_predicted = false;
};

struct SessionInfo {
    std::string id;
    std::int64_t created_unix = 0;
    std::string mask_png;
    std::string render_png;
};

/// In-memory sessions with LRU eviction and, when a directory is given,
/// persisted (image, mask) pairs from which evicted or pre-restart sessions
/// are rebuilt on demand.
class SessionStore {
public:
    SessionStore(std::shared_ptr<const Model> model, std::size_t capacity = 64,
                 std::optional<std::filesystem::path> session_dir = std::nullopt);

    CreateResult create(const std::string& image_png, const std::optional<std::string>& mask_png);
    /// Renders the edited mask with the session's cached style.
    std::string apply_edit(const std::string& id, const std::string& mask_png);
    SessionInfo info(const std::string& id);

    std::size_t resident() const;
    bool has_model() const { return static_cast<bool>(model_); }
    const Model& model() const;

private:
    std::shared_ptr<EditSession> find(const std::string& id);
    std::shared_ptr<EditSession> build(const std::string& id, const ImageTensor& image, const LabelMask& mask);
    void insert(const std::shared_ptr<EditSession>& s);
    std::string new_id();

    std::shared_ptr<const Model> model_;
    std::size_t capacity_;
    std::optional<std::filesystem::path> dir_;
    mutable std::mutex mutex_;  // guards the index and LRU order only
    std::list<std::string> lru_;  // front = most recent
    std::map<std::string, std::pair<std::shared_ptr<EditSession>, std::list<std::string>::iterator>> sessions_;
    std::uint64_t counter_ = 0;
};

/// Share of the changed-pixel mass |after - before| (summed over channels)
/// that falls inside the bounding box of the pixels whose label differs
/// between the two masks. 1 when nothing changed.
double localization_score(const ImageTensor& before, const ImageTensor& after, const LabelMask& mask_before,
                          const LabelMask& mask_after);

/// Grows every region of `category` by `radius` pixels (square dilation).
LabelMask dilate_category(const LabelMask& mask, int category, int radius);

/// HTTP front end:
///   GET  /healthz               {"status", "model_loaded"}
///   GET  /palette               palette JSON plus resolution
///   POST /sessions              multipart "image" (+ optional "mask") PNGs;
///                               JSON with id and base64 mask/render PNGs
///   POST /sessions/{id}/edits   mask PNG body (or multipart "mask"); PNG
///   GET  /sessions/{id}         JSON metadata with base64 mask/render PNGs
/// Errors are JSON {"error", "bad_pixels"?} with 4xx/5xx status; without a
/// model every model-backed endpoint answers 503.
class Server {
public:
    explicit Server(std::shared_ptr<SessionStore> store);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and serves on the calling thread until stop().
    bool listen(const std::string& host, int port);
    /// Binds to a free port and returns it; serve with listen_after_bind().
    int bind_any_port(const std::string& host);
    bool listen_after_bind();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace maskgan::serve
