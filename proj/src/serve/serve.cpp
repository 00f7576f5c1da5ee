#include "maskgan/serve/serve.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "maskgan/core/checkpoint.hpp"
#include "maskgan/core/log.hpp"
#include "maskgan/train/train.hpp"
#include "mask/png_io.hpp"

namespace maskgan::serve {

using json = nlohmann::json;

std::shared_ptr<const Model> load_model(const std::filesystem::path& ckpt,
                                        const std::optional<std::filesystem::path>& parser) {
    const Checkpoint c = Checkpoint::load(ckpt);
    auto m = std::make_shared<Model>();
    m->palette = CategoryPalette::from_json(c.meta_at("palette"));
    const train::TrainConfig config = train::TrainConfig::parse(c.meta_at("config"));
    Rng rng(0);
    m->net = dmn::DenseMappingNetwork(config.dmn_config(m->palette.count()), rng);
    m->net.params().restore(c.with_prefix("dmn."));
    if (parser) {
        m->parser = eval::load_parser(*parser);
        if (m->parser->config().categories != m->palette.count())
            throw PaletteMismatch("parser predicts " + std::to_string(m->parser->config().categories) +
                                  " categories, model uses " + std::to_string(m->palette.count()));
    }
    return m;
}

ImageTensor decode_upload_image(const std::string& bytes, int resolution) {
    ImageTensor img;
    try {
        img = decode_image_png(bytes);
    } catch (const CodecError& e) {
        throw ServeError(400, std::string("undecodable image: ") + e.what());
    }
    if (img.height() != resolution || img.width() != resolution) img = resize_image_area(img, resolution, resolution);
    return img;
}

LabelMask decode_upload_mask(const std::string& bytes, const CategoryPalette& palette, int resolution) {
    LabelMask mask;
    try {
        mask = decode_mask_png(bytes, palette);
    } catch (const PaletteMismatch& e) {
        throw ServeError(422, e.what());
    } catch (const CodecError& e) {
        png::Raster raster;
        try {
            raster = png::read_indexed(bytes);
        } catch (const std::exception&) {
            throw ServeError(400, std::string("undecodable mask: ") + e.what());
        }
        const auto bad = std::count_if(raster.pixels.begin(), raster.pixels.end(),
                                       [&](std::uint8_t v) { return v >= palette.count(); });
        throw ServeError(422, std::string("invalid mask: ") + e.what(), bad);
    }
    if (mask.height() != resolution || mask.width() != resolution) mask = resize_mask(mask, resolution, resolution);
    return mask;
}

dmn::StyleParams compute_style(const Model& model, const ImageTensor& image, const LabelMask& mask) {
    NoGradGuard ng;
    const LabelMask m[] = {mask};
    return model.net.style(Var::leaf(image.values), Var::leaf(onehot_batch(m, model.palette.count()))).detached();
}

ImageTensor render(const Model& model, const dmn::StyleParams& style, const LabelMask& mask) {
    NoGradGuard ng;
    const LabelMask m[] = {mask};
    return ImageTensor{model.net.generate(style, Var::leaf(onehot_batch(m, model.palette.count()))).value()};
}

std::string infer_png(const Model& model, const std::string& target_image, const std::string& target_mask,
                      const std::string& source_mask) {
    const int r = model.resolution();
    const ImageTensor image = decode_upload_image(target_image, r);
    const LabelMask mt = decode_upload_mask(target_mask, model.palette, r);
    const LabelMask ms = decode_upload_mask(source_mask, model.palette, r);
    return encode_image_png(render(model, compute_style(model, image, mt), ms));
}

SessionStore::SessionStore(std::shared_ptr<const Model> model, std::size_t capacity,
                           std::optional<std::filesystem::path> session_dir)
    : model_(std::move(model)), capacity_(std::max<std::size_t>(1, capacity)), dir_(std::move(session_dir)) {
    if (dir_) std::filesystem::create_directories(*dir_);
}

const Model& SessionStore::model() const {
    if (!model_) throw ServeError(503, "no model loaded");
    return *model_;
}

std::string SessionStore::new_id() {
    static thread_local std::mt19937_64 gen(std::random_device{}());
    std::lock_guard<std::mutex> lock(mutex_);
    char buf[40];
    std::snprintf(buf, sizeof buf, "%08llx%012llx", static_cast<unsigned long long>(++counter_ & 0xffffffffull),
                  static_cast<unsigned long long>(gen() & 0xffffffffffffull));
    return buf;
}

std::shared_ptr<EditSession> SessionStore::build(const std::string& id, const ImageTensor& image, const LabelMask& mask) {
    const Model& m = model();
    auto s = std::make_shared<EditSession>();
    s->id = id;
    s->target = image;
    s->target_mask = mask;
    s->style = compute_style(m, image, mask);
    s->created = std::chrono::system_clock::now();
    s->initial_render = encode_image_png(render(m, s->style, mask));
    return s;
}

void SessionStore::insert(const std::shared_ptr<EditSession>& s) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = sessions_.find(s->id);
    if (it != sessions_.end()) {
        lru_.erase(it->second.second);
        sessions_.erase(it);
    }
    lru_.push_front(s->id);
    sessions_[s->id] = {s, lru_.begin()};
    while (sessions_.size() > capacity_) {
        sessions_.erase(lru_.back());
        lru_.pop_back();
    }
}

CreateResult SessionStore::create(const std::string& image_png, const std::optional<std::string>& mask_png) {
    const Model& m = model();
    const ImageTensor image = decode_upload_image(image_png, m.resolution());
    CreateResult out;
    if (mask_png) {
        out.mask = decode_upload_mask(*mask_png, m.palette, m.resolution());
    } else if (m.parser) {
        const eval::SegmentationParser parser(*m.parser);
        const int none[] = {0};
        out.mask = parser.parse(image.values, none).front();
        out.mask_predicted = true;
    } else {
        throw ServeError(422, "no mask uploaded and no parser loaded");
    }
    out.id = new_id();
    auto s = build(out.id, image, out.mask);
    if (dir_) {
        const auto d = *dir_ / out.id;
        std::filesystem::create_directories(d);
        // original upload bytes, so a rebuilt session decodes to the same tensors
        write_file((d / "image.png").string(), image_png);
        write_file((d / "mask.png").string(), mask_png ? *mask_png : encode_mask_png(out.mask, m.palette));
        write_file((d / "created").string(),
                   std::to_string(std::chrono::duration_cast<std::chrono::seconds>(s->created.time_since_epoch()).count()));
    }
    out.mask_png = encode_mask_png(out.mask, m.palette);
    out.render_png = s->initial_render;
    insert(s);
    return out;
}

std::shared_ptr<EditSession> SessionStore::find(const std::string& id) {
    {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = sessions_.find(id);
        if (it != sessions_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second.second);
            return it->second.first;
        }
    }
    const bool safe = !id.empty() && std::all_of(id.begin(), id.end(), [](char c) { return std::isxdigit(static_cast<unsigned char>(c)); });
    if (!dir_ || !safe || !std::filesystem::exists(*dir_ / id / "image.png"))
        throw ServeError(404, "unknown session '" + id + "'");
    const Model& m = model();
    const auto d = *dir_ / id;
    auto s = build(id, decode_upload_image(read_file((d / "image.png").string()), m.resolution()),
                   decode_upload_mask(read_file((d / "mask.png").string()), m.palette, m.resolution()));
    std::int64_t created = 0;
    std::istringstream(read_file((d / "created").string())) >> created;
    s->created = std::chrono::system_clock::time_point(std::chrono::seconds(created));
    insert(s);
    log::info("session " + id + " rebuilt from " + d.string());
    return s;
}

std::string SessionStore::apply_edit(const std::string& id, const std::string& mask_png) {
    const Model& m = model();
    auto s = find(id);
    const LabelMask mask = decode_upload_mask(mask_png, m.palette, m.resolution());
    std::lock_guard<std::mutex> lock(s->mutex);
    return encode_image_png(render(m, s->style, mask));
}

SessionInfo SessionStore::info(const std::string& id) {
    const Model& m = model();
    auto s = find(id);
    SessionInfo i;
    i.id = s->id;
    i.created_unix = std::chrono::duration_cast<std::chrono::seconds>(s->created.time_since_epoch()).count();
    i.mask_png = encode_mask_png(s->target_mask, m.palette);
    i.render_png = s->initial_render;
    return i;
}

std::size_t SessionStore::resident() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return sessions_.size();
}

double localization_score(const ImageTensor& before, const ImageTensor& after, const LabelMask& mask_before,
                          const LabelMask& mask_after) {
    require_same_shape(before.values.shape(), after.values.shape(), "localization_score");
    const int h = mask_before.height(), w = mask_before.width();
    if (mask_after.height() != h || mask_after.width() != w || before.height() != h || before.width() != w)
        throw ShapeError("localization_score: image and mask sizes differ");
    int y0 = h, y1 = -1, x0 = w, x1 = -1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask_before(y, x) != mask_after(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    double inside = 0, total = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double d = std::abs(double(after.values.at(0, c, y, x)) - before.values.at(0, c, y, x));
                total += d;
                if (y >= y0 && y <= y1 && x >= x0 && x <= x1) inside += d;
            }
    return total > 0 ? inside / total : 1.0;
}

LabelMask dilate_category(const LabelMask& mask, int category, int radius) {
    LabelMask out = mask;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) {
            if (mask(y, x) != category) continue;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < mask.height() && xx >= 0 && xx < mask.width())
                        out(yy, xx) = static_cast<std::uint8_t>(category);
                }
        }
    return out;
}

struct Server::Impl {
    std::shared_ptr<SessionStore> store;
    httplib::Server http;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& message, std::int64_t bad_pixels = -1) {
    json j = {{"error", message}};
    if (bad_pixels >= 0) j["bad_pixels"] = bad_pixels;
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

std::string b64(const std::string& bytes) { return httplib::detail::base64_encode(bytes); }

template <class F>
void guarded(httplib::Response& res, F&& body) {
    try {
        body();
    } catch (const ServeError& e) {
        send_error(res, e.status, e.what(), e.bad_pixels);
    } catch (const PaletteMismatch& e) {
        send_error(res, 422, e.what());
    } catch (const CodecError& e) {
        send_error(res, 400, e.what());
    } catch (const std::exception& e) {
        log::error(std::string("request failed: ") + e.what());
        send_error(res, 500, e.what());
    }
}

}  // namespace

Server::Server(std::shared_ptr<SessionStore> store) : impl_(std::make_unique<Impl>()) {
    impl_->store = std::move(store);
    auto& http = impl_->http;
    SessionStore* st = impl_->store.get();

    http.Get("/healthz", [st](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"status", "ok"}, {"model_loaded", st->has_model()}}.dump(), "application/json");
    });

    http.Get("/palette", [st](const httplib::Request&, httplib::Response& res) {
        guarded(res, [&] {
            const Model& m = st->model();
            json j = json::parse(m.palette.to_json());
            res.set_content(json{{"palette", j}, {"resolution", m.resolution()}, {"categories", m.palette.count()}}.dump(),
                            "application/json");
        });
    });

    http.Post("/sessions", [st](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            st->model();
            if (!req.has_file("image")) throw ServeError(400, "multipart field 'image' is required");
            std::optional<std::string> mask;
            if (req.has_file("mask")) mask = req.get_file_value("mask").content;
            const CreateResult r = st->create(req.get_file_value("image").content, mask);
            res.status = 201;
            res.set_content(json{{"id", r.id},
                                 {"resolution", st->model().resolution()},
                                 {"mask_predicted", r.mask_predicted},
                                 {"palette", json::parse(st->model().palette.to_json())},
                                 {"mask_png", b64(r.mask_png)},
                                 {"render_png", b64(r.render_png)}}
                                .dump(),
                            "application/json");
        });
    });

    http.Post(R"(/sessions/([^/]+)/edits)", [st](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            st->model();
            const std::string body = req.has_file("mask") ? req.get_file_value("mask").content : req.body;
            if (body.empty()) throw ServeError(400, "edited mask PNG required");
            res.set_content(st->apply_edit(req.matches[1], body), "image/png");
        });
    });

    http.Get(R"(/sessions/([^/]+))", [st](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const SessionInfo i = st->info(req.matches[1]);
            res.set_content(json{{"id", i.id},
                                 {"created", i.created_unix},
                                 {"resolution", st->model().resolution()},
                                 {"mask_png", b64(i.mask_png)},
                                 {"render_png", b64(i.render_png)}}
                                .dump(),
                            "application/json");
        });
    });
}

Server::~Server() { stop(); }

bool Server::listen(const std::string& host, int port) { return impl_->http.listen(host, port); }

int Server::bind_any_port(const std::string& host) { return impl_->http.bind_to_any_port(host); }

bool Server::listen_after_bind() { return impl_->http.listen_after_bind(); }

void Server::stop() {
    if (impl_) impl_->http.stop();
}

}  // namespace maskgan::serve
