#pragma once

// Client side of the segmenter bridge: JSON over HTTP/1.1 with base64 PNG
// payloads. POST /segment answers a box prompt, GET /health reports readiness.

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/prompt.hpp"

namespace httplib {
class Client;
}

namespace hrfseg::bridge {

inline constexpr int kDefaultPort = 8731;

struct SegmentRequest {
  Tensor image;  // S x S, values in [0, 1]
  prompt::Box box;
  std::string request_id;
};

struct SegmentResponse {
  std::vector<prompt::MaskCandidate> masks;  // descending score
  std::string request_id;
};

nlohmann::json encode_request(const SegmentRequest& r);
// Image comes back as 8-bit gray in [0, 1]. Throws FormatError naming the
// offending field.
SegmentRequest decode_request(const nlohmann::json& j);
nlohmann::json encode_response(const SegmentResponse& r);
SegmentResponse decode_response(const nlohmann::json& j);

class BridgeSegmenter final : public prompt::Segmenter {
 public:
  // `url` like "http://127.0.0.1:8731"; `side` is the upsampled crop size.
  explicit BridgeSegmenter(std::string url, std::size_t side = prompt::kBridgeSide, double timeout_s = 60.0);
  ~BridgeSegmenter() override;

  // Throws SegmenterError unless /health answers 200.
  nlohmann::json health();
  std::vector<prompt::MaskCandidate> segment(const Tensor& crop, const prompt::Box& box) override;
  std::size_t native_side() const override { return side_; }
  std::string name() const override { return "bridge:" + url_; }

 private:
  std::string url_;
  std::size_t side_;
  std::unique_ptr<httplib::Client> client_;
  std::mutex mu_;
  std::uint64_t next_id_ = 0;
  bool healthy_ = false;
};

}  // namespace hrfseg::bridge
