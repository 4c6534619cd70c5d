#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "gear/adaptor.hpp"
#include "gear/distortion.hpp"
#include "gear/net.hpp"

namespace gear {

struct InferenceRequest {
  /// C x H x W, matching the base model input.
  Tensor image;
  /// Absent: estimate brightness from the pixels.
  std::optional<DistortionLevel> declared_level;
};

struct InferenceResult {
  /// K class probabilities.
  Tensor probabilities;
  DistortionLevel resolved;
  /// Index into Engine::adaptors(), or empty when the base served alone.
  std::optional<std::size_t> adaptor_id;
};

/// One base model plus resident adaptors. Requests pick the adaptor whose
/// level is nearest to the declared (or estimated) level and run the base
/// with that adaptor's layers swapped in.
///
/// Adaptor layers are materialized once at load; a level switch swaps a
/// pointer table, so nothing in the base is ever written. `swap_counter`
/// counts the adaptor parameters brought into service by each switch.
/// Requests may be issued from several threads.
class Engine {
 public:
  Engine(Model base, std::vector<AdaptorPatch> patches, float reference_brightness = kReferenceBrightness);
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const Model& base() const noexcept { return base_; }
  std::uint64_t base_hash() const noexcept { return base_hash_; }
  /// Sorted by (kind, level).
  std::span<const AdaptorPatch> adaptors() const noexcept { return patches_; }
  float reference_brightness() const noexcept { return reference_brightness_; }

  std::size_t resident_params() const noexcept;
  DistortionLevel active_level() const;
  std::uint64_t swap_counter() const;

  DistortionLevel resolve_level(const InferenceRequest& request) const;
  InferenceResult infer(const InferenceRequest& request);

 private:
  struct Resolution {
    DistortionLevel level;
    std::optional<std::size_t> adaptor;
  };
  Resolution resolve(const InferenceRequest& request) const;
  std::span<const LayerRecord* const> view(std::optional<std::size_t> adaptor) const;

  Model base_;
  std::uint64_t base_hash_;
  std::vector<AdaptorPatch> patches_;
  // Per adaptor: owned copies of its layers and the full pointer table.
  std::vector<std::vector<LayerRecord>> patched_layers_;
  std::vector<std::vector<const LayerRecord*>> views_;
  std::vector<const LayerRecord*> base_view_;
  float reference_brightness_;

  mutable std::mutex mutex_;
  DistortionLevel active_level_;
  std::optional<std::size_t> active_adaptor_;
  std::uint64_t swap_counter_ = 0;
};

/// Loads the base and patches; rejects incompatible patches (naming the
/// offending file) and duplicate levels.
std::unique_ptr<Engine> engine_load(const std::filesystem::path& base_path,
                                    std::span<const std::filesystem::path> patch_paths,
                                    float reference_brightness = kReferenceBrightness);

// ---------------------------------------------------------------------------
// Wire protocol

inline constexpr std::uint8_t kAutoLevelTag = 255;

enum class FrameError : std::uint32_t {
  bad_magic = 1,
  unknown_kind = 2,
  shape_mismatch = 3,
  oversize = 4,
  bad_request = 5,
};

std::vector<std::uint8_t> encode_request(const InferenceRequest& request);

struct Response {
  /// 0 on success; otherwise `error` is set and the payload is empty.
  std::uint8_t status = 0;
  DistortionLevel resolved;
  std::vector<float> probabilities;
  std::uint32_t error = 0;
};

std::vector<std::uint8_t> encode_response(const InferenceResult& result);
std::vector<std::uint8_t> encode_error(FrameError code);
Response decode_response(std::span<const std::uint8_t> frame);

/// Blocking byte transport.
class Channel {
 public:
  virtual ~Channel() = default;
  /// Fills `out` completely, or returns false on end of stream.
  virtual bool read_exact(std::span<std::uint8_t> out) = 0;
  virtual bool write_all(std::span<const std::uint8_t> bytes) = 0;
};

class StreamChannel final : public Channel {
 public:
  StreamChannel(std::istream& in, std::ostream& out) : in_(in), out_(out) {}
  bool read_exact(std::span<std::uint8_t> out) override;
  bool write_all(std::span<const std::uint8_t> bytes) override;

 private:
  std::istream& in_;
  std::ostream& out_;
};

class SocketChannel final : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {}
  ~SocketChannel() override;
  SocketChannel(const SocketChannel&) = delete;
  SocketChannel& operator=(const SocketChannel&) = delete;
  bool read_exact(std::span<std::uint8_t> out) override;
  bool write_all(std::span<const std::uint8_t> bytes) override;

  /// Connects to 127.0.0.1:`port`.
  static std::unique_ptr<SocketChannel> connect_local(std::uint16_t port);

 private:
  int fd_;
};

/// Reads one response frame from a channel (client side).
std::optional<Response> read_response(Channel& channel);

struct ServeOptions {
  /// Frames declaring more pixels than this get an oversize error and the
  /// connection is closed.
  std::size_t max_pixels = std::size_t{1} << 22;
};

/// Answers request frames until end of stream, a transport failure or an
/// oversize frame. Returns the number of frames answered.
std::size_t serve(Engine& engine, Channel& channel, const ServeOptions& options = {});

/// TCP listener on 127.0.0.1; each connection is served on its own thread.
class TcpServer {
 public:
  /// Port 0 picks an ephemeral port.
  TcpServer(Engine& engine, std::uint16_t port, ServeOptions options = {});
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  /// Accepts connections until stop().
  void run();
  void stop();

 private:
  Engine& engine_;
  ServeOptions options_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
};

}  // namespace gear
