#include "hrfseg/bridge.hpp"

#include <httplib.h>

#include "hrfseg/error.hpp"
#include "hrfseg/io/png.hpp"

namespace hrfseg::bridge {

nlohmann::json encode_request(const SegmentRequest& r) {
  const auto& b = r.box;
  return {{"image", io::base64_encode(io::encode_png(io::gray_to_rgb(r.image)))},
          {"box", {b.x0, b.y0, b.x1, b.y1}},
          {"request_id", r.request_id}};
}

SegmentRequest decode_request(const nlohmann::json& j) {
  SegmentRequest r;
  if (!j.is_object()) throw FormatError("request: body is not a JSON object");
  if (!j.contains("image") || !j["image"].is_string()) throw FormatError("image: missing or not a string");
  if (!j.contains("box") || !j["box"].is_array() || j["box"].size() != 4) {
    throw FormatError("box: expected [x0, y0, x1, y1]");
  }
  for (const auto& v : j["box"]) {
    if (!v.is_number_unsigned()) throw FormatError("box: coordinates must be non-negative integers");
  }
  r.request_id = j.value("request_id", "");
  io::Raster img;
  try {
    img = io::decode_png(io::base64_decode(j["image"].get<std::string>()));
  } catch (const FormatError& e) {
    throw FormatError(std::string("image: ") + e.what());
  }
  r.image = Tensor({img.rows, img.cols});
  for (std::size_t p = 0; p < img.rows * img.cols; ++p) r.image[p] = img.data[p * img.channels] / 255.0;
  r.box = {j["box"][0].get<std::size_t>(), j["box"][1].get<std::size_t>(), j["box"][2].get<std::size_t>(),
           j["box"][3].get<std::size_t>()};
  if (r.box.x1 <= r.box.x0 || r.box.y1 <= r.box.y0 || r.box.x1 > img.cols || r.box.y1 > img.rows) {
    throw FormatError("box: empty or outside the image");
  }
  return r;
}

nlohmann::json encode_response(const SegmentResponse& r) {
  nlohmann::json masks = nlohmann::json::array();
  for (const auto& c : r.masks) masks.push_back({{"mask", io::base64_encode(io::encode_mask_png(c.mask))}, {"score", c.score}});
  return {{"masks", masks}, {"request_id", r.request_id}};
}

SegmentResponse decode_response(const nlohmann::json& j) {
  SegmentResponse r;
  if (!j.is_object() || !j.contains("masks") || !j["masks"].is_array()) throw FormatError("masks: missing");
  r.request_id = j.value("request_id", "");
  for (const auto& m : j["masks"]) {
    if (!m.contains("mask") || !m["mask"].is_string()) throw FormatError("masks[].mask: missing");
    if (!m.contains("score") || !m["score"].is_number()) throw FormatError("masks[].score: missing");
    r.masks.push_back({io::decode_mask_png(io::base64_decode(m["mask"].get<std::string>())), m["score"].get<double>()});
  }
  return r;
}

BridgeSegmenter::BridgeSegmenter(std::string url, std::size_t side, double timeout_s)
    : url_(std::move(url)), side_(side) {
  if (side_ == 0 || side_ > prompt::kBridgeSide) throw ArgumentError("bridge: side must be in 1..1024");
  client_ = std::make_unique<httplib::Client>(url_);
  if (!client_->is_valid()) throw ArgumentError("bridge: invalid url '" + url_ + "'");
  const auto t = std::chrono::duration<double>(timeout_s);
  client_->set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
  client_->set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
  client_->set_keep_alive(true);
}

BridgeSegmenter::~BridgeSegmenter() = default;

nlohmann::json BridgeSegmenter::health() {
  std::lock_guard lock(mu_);
  auto res = client_->Get("/health");
  if (!res) throw SegmenterError(name() + " unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) throw SegmenterError(name() + " unavailable: /health returned " + std::to_string(res->status));
  healthy_ = true;
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    return nlohmann::json::object();
  }
}

std::vector<prompt::MaskCandidate> BridgeSegmenter::segment(const Tensor& crop, const prompt::Box& box) {
  if (!healthy_) health();
  std::lock_guard lock(mu_);
  SegmentRequest req{crop, box, std::to_string(next_id_++)};
  auto res = client_->Post("/segment", encode_request(req).dump(), "application/json");
  if (!res) throw SegmenterError(name() + " unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw SegmenterError(name() + " /segment returned " + std::to_string(res->status) + ": " + res->body);
  }
  SegmentResponse out;
  try {
    out = decode_response(nlohmann::json::parse(res->body));
  } catch (const std::exception& e) {
    throw SegmenterError(name() + " sent a malformed response: " + e.what());
  }
  if (out.request_id != req.request_id) throw SegmenterError(name() + " echoed the wrong request id");
  if (out.masks.empty()) throw SegmenterError(name() + " returned no masks");
  for (const auto& m : out.masks) {
    if (m.mask.rows != crop.dim(0) || m.mask.cols != crop.dim(1)) {
      throw SegmenterError(name() + " returned a mask of the wrong size");
    }
  }
  return out.masks;
}

}  // namespace hrfseg::bridge
