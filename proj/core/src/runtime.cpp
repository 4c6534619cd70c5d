#include "gear/runtime.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <istream>
#include <ostream>
#include <thread>

#include "gear/binary_io.hpp"
#include "gear/error.hpp"

namespace gear {

namespace {

constexpr std::string_view kRequestMagic = "GNRQ";
constexpr std::string_view kResponseMagic = "GNRS";
constexpr std::size_t kRequestHeader = 4 + 1 + 4 + 12;

bool level_less(const AdaptorPatch& a, const AdaptorPatch& b) {
  return std::pair(a.level.kind, a.level.level) < std::pair(b.level.kind, b.level.level);
}

// How far a level is from undistorted input, for breaking distance ties.
double distortion_rank(const DistortionLevel& l) {
  switch (l.kind) {
    case DistortionKind::jpeg_quality:
    case DistortionKind::resolution:
      return -static_cast<double>(l.level);
    case DistortionKind::brightness:
      return std::fabs(static_cast<double>(l.level) - 1.0);
    case DistortionKind::none:
      break;
  }
  return 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Engine

Engine::Engine(Model base, std::vector<AdaptorPatch> patches, float reference_brightness)
    : base_(std::move(base)), patches_(std::move(patches)), reference_brightness_(reference_brightness) {
  base_.validate();
  if (base_.layers.empty()) throw InvalidArgument("engine: base model has no layers");
  if (!(reference_brightness_ > 0.0f)) throw InvalidArgument("engine: reference brightness must be > 0");
  base_hash_ = model_hash(base_);
  std::stable_sort(patches_.begin(), patches_.end(), level_less);
  for (std::size_t i = 1; i < patches_.size(); ++i) {
    if (patches_[i].level == patches_[i - 1].level) {
      throw InvalidArgument("engine: duplicate adaptor level " + patches_[i].level.label());
    }
  }
  for (const auto& p : patches_) {
    Model composed = compose(base_, base_hash_, p);
    auto& owned = patched_layers_.emplace_back();
    for (const auto& e : p.entries) owned.push_back(std::move(composed.layers[e.layer_index]));
  }
  for (const auto& l : base_.layers) base_view_.push_back(&l);
  for (std::size_t a = 0; a < patches_.size(); ++a) {
    auto v = base_view_;
    for (std::size_t k = 0; k < patches_[a].entries.size(); ++k) {
      v[patches_[a].entries[k].layer_index] = &patched_layers_[a][k];
    }
    views_.push_back(std::move(v));
  }
}

std::size_t Engine::resident_params() const noexcept {
  std::size_t n = base_.param_count();
  for (const auto& p : patches_) n += p.param_count();
  return n;
}

DistortionLevel Engine::active_level() const {
  std::lock_guard lock(mutex_);
  return active_level_;
}

std::uint64_t Engine::swap_counter() const {
  std::lock_guard lock(mutex_);
  return swap_counter_;
}

Engine::Resolution Engine::resolve(const InferenceRequest& request) const {
  DistortionLevel target;
  if (request.declared_level) {
    target = *request.declared_level;
  } else {
    target = DistortionLevel::bright(estimate_brightness(request.image, reference_brightness_));
  }
  Resolution best{DistortionLevel::none(), std::nullopt};
  if (!std::isfinite(target.level)) return best;
  double best_distance = 0.0;
  const double slack = 1e-6 * std::max(1.0, std::fabs(static_cast<double>(target.level)));
  for (std::size_t a = 0; a < patches_.size(); ++a) {
    const auto& l = patches_[a].level;
    if (l.kind != target.kind) continue;
    const double d = std::fabs(static_cast<double>(l.level) - static_cast<double>(target.level));
    const bool better = !best.adaptor || d < best_distance - slack ||
                        (d <= best_distance + slack && distortion_rank(l) < distortion_rank(best.level));
    if (better) {
      best = {l, a};
      best_distance = d;
    }
  }
  return best;
}

DistortionLevel Engine::resolve_level(const InferenceRequest& request) const { return resolve(request).level; }

std::span<const LayerRecord* const> Engine::view(std::optional<std::size_t> adaptor) const {
  return adaptor ? std::span<const LayerRecord* const>(views_[*adaptor]) : std::span<const LayerRecord* const>(base_view_);
}

InferenceResult Engine::infer(const InferenceRequest& request) {
  const Shape in = base_.input_shape();
  if (request.image.shape() != in) {
    throw InvalidArgument("infer: image shape does not match the model input");
  }
  const Resolution r = resolve(request);
  {
    std::lock_guard lock(mutex_);
    if (r.adaptor != active_adaptor_ || r.level != active_level_) {
      active_adaptor_ = r.adaptor;
      active_level_ = r.level;
      if (r.adaptor) swap_counter_ += patches_[*r.adaptor].param_count();
    }
  }
  const Tensor logits = forward(view(r.adaptor), request.image.reshaped({1, in[0], in[1], in[2]}));
  const Tensor probs = softmax(logits);
  return InferenceResult{probs.reshaped({probs.size()}), r.level, r.adaptor};
}

std::unique_ptr<Engine> engine_load(const std::filesystem::path& base_path,
                                    std::span<const std::filesystem::path> patch_paths, float reference_brightness) {
  Model base = load_model(base_path);
  const std::uint64_t h = model_hash(base);
  std::vector<AdaptorPatch> patches;
  for (const auto& path : patch_paths) {
    auto p = load_patch(path);
    if (p.base_hash != h) throw CompatibilityError(path.string() + ": patch was built for a different base model");
    patches.push_back(std::move(p));
  }
  return std::make_unique<Engine>(std::move(base), std::move(patches), reference_brightness);
}

// ---------------------------------------------------------------------------
// Frames

std::vector<std::uint8_t> encode_request(const InferenceRequest& request) {
  if (request.image.rank() != 3) throw InvalidArgument("encode_request: image must be C x H x W");
  ByteWriter w;
  w.raw(kRequestMagic);
  if (request.declared_level) {
    w.u8(static_cast<std::uint8_t>(request.declared_level->kind));
    w.f32(request.declared_level->level);
  } else {
    w.u8(kAutoLevelTag);
    w.f32(0.0f);
  }
  for (std::size_t d : request.image.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(request.image.values());
  return w.take();
}

std::vector<std::uint8_t> encode_response(const InferenceResult& result) {
  ByteWriter w;
  w.raw(kResponseMagic);
  w.u8(0);
  w.u8(static_cast<std::uint8_t>(result.resolved.kind));
  w.f32(result.resolved.level);
  w.u32(static_cast<std::uint32_t>(result.probabilities.size()));
  w.f32s(result.probabilities.values());
  return w.take();
}

std::vector<std::uint8_t> encode_error(FrameError code) {
  ByteWriter w;
  w.raw(kResponseMagic);
  w.u8(1);
  w.u32(static_cast<std::uint32_t>(code));
  return w.take();
}

Response decode_response(std::span<const std::uint8_t> frame) {
  ByteReader r(frame);
  r.expect_magic(kResponseMagic);
  Response out;
  out.status = r.u8();
  if (out.status != 0) {
    out.error = r.u32();
  } else {
    const std::size_t kind_at = r.offset();
    const auto kind = distortion_kind_from_tag(r.u8());
    if (!kind) throw FormatError(kind_at, "unknown distortion kind tag");
    out.resolved = {*kind, r.f32()};
    const std::uint32_t k = r.u32();
    r.require(std::size_t{k} * 4, "probabilities");
    out.probabilities.resize(k);
    r.f32s(out.probabilities);
  }
  if (r.remaining() != 0) throw FormatError(r.offset(), "trailing bytes after response frame");
  return out;
}

std::optional<Response> read_response(Channel& channel) {
  std::vector<std::uint8_t> frame(5);
  if (!channel.read_exact(frame)) return std::nullopt;
  if (frame[4] != 0) {
    frame.resize(9);
    if (!channel.read_exact(std::span(frame).subspan(5))) return std::nullopt;
  } else {
    frame.resize(14);
    if (!channel.read_exact(std::span(frame).subspan(5))) return std::nullopt;
    ByteReader r{std::span<const std::uint8_t>(frame).subspan(10)};
    const std::size_t k = r.u32();
    frame.resize(14 + 4 * k);
    if (!channel.read_exact(std::span(frame).subspan(14))) return std::nullopt;
  }
  return decode_response(frame);
}

// ---------------------------------------------------------------------------
// Transports

bool StreamChannel::read_exact(std::span<std::uint8_t> out) {
  in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
  return static_cast<std::size_t>(in_.gcount()) == out.size();
}

bool StreamChannel::write_all(std::span<const std::uint8_t> bytes) {
  out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out_.flush();
  return static_cast<bool>(out_);
}

SocketChannel::~SocketChannel() {
  if (fd_ >= 0) ::close(fd_);
}

bool SocketChannel::read_exact(std::span<std::uint8_t> out) {
  std::size_t got = 0;
  while (got < out.size()) {
    const ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    got += static_cast<std::size_t>(n);
  }
  return true;
}

bool SocketChannel::write_all(std::span<const std::uint8_t> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

std::unique_ptr<SocketChannel> SocketChannel::connect_local(std::uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw Error("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw Error("connect to port " + std::to_string(port) + " failed");
  }
  return std::make_unique<SocketChannel>(fd);
}

std::size_t serve(Engine& engine, Channel& channel, const ServeOptions& options) {
  const Shape in = engine.base().input_shape();
  std::size_t answered = 0;
  std::vector<std::uint8_t> header(kRequestHeader);
  std::vector<std::uint8_t> payload;
  while (channel.read_exact(header)) {
    ByteReader r(header);
    const bool magic_ok = r.str(4) == kRequestMagic;
    const std::uint8_t tag = r.u8();
    const float level = r.f32();
    const std::uint64_t c = r.u32(), h = r.u32(), w = r.u32();
    // Each dimension is < 2^32, so the first product cannot overflow.
    const std::uint64_t ch = c * h;
    const bool too_big = (w != 0 && ch > options.max_pixels / w) || ch * w > options.max_pixels;
    if (too_big) {
      channel.write_all(encode_error(FrameError::oversize));
      break;
    }
    const std::size_t pixels = static_cast<std::size_t>(ch * w);
    payload.resize(pixels * 4);
    if (!channel.read_exact(payload)) break;

    std::vector<std::uint8_t> reply;
    const auto kind = distortion_kind_from_tag(tag);
    if (!magic_ok) {
      reply = encode_error(FrameError::bad_magic);
    } else if (!kind && tag != kAutoLevelTag) {
      reply = encode_error(FrameError::unknown_kind);
    } else if (c != in[0] || h != in[1] || w != in[2]) {
      reply = encode_error(FrameError::shape_mismatch);
    } else if (!std::isfinite(level)) {
      reply = encode_error(FrameError::bad_request);
    } else {
      InferenceRequest req{Tensor({in[0], in[1], in[2]}), std::nullopt};
      ByteReader pr(payload);
      pr.f32s(req.image.values());
      if (kind) req.declared_level = DistortionLevel{*kind, level};
      try {
        reply = encode_response(engine.infer(req));
      } catch (const Error&) {
        reply = encode_error(FrameError::bad_request);
      }
    }
    if (!channel.write_all(reply)) break;
    ++answered;
  }
  return answered;
}

TcpServer::TcpServer(Engine& engine, std::uint16_t port, ServeOptions options)
    : engine_(engine), options_(options) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error("socket() failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
    ::close(listen_fd_);
    throw Error("cannot listen on port " + std::to_string(port));
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpServer::~TcpServer() {
  stop();
  ::close(listen_fd_);
}

void TcpServer::run() {
  std::vector<std::thread> workers;
  while (!stopping_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    workers.emplace_back([this, fd] {
      SocketChannel channel(fd);
      serve(engine_, channel, options_);
    });
  }
  for (auto& t : workers) t.join();
}

void TcpServer::stop() {
  if (!stopping_.exchange(true)) ::shutdown(listen_fd_, SHUT_RDWR);
}

}  // namespace gear
