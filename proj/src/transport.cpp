// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "dlora/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <thread>

namespace dlora {

namespace {

struct Queue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<std::uint8_t>> frames;
  bool closed = false;
};

class LocalTransport : public Transport {
 public:
  LocalTransport(std::shared_ptr<Queue> in, std::shared_ptr<Queue> out) : in_(std::move(in)), out_(std::move(out)) {}
  ~LocalTransport() override { close(); }

  void send(std::vector<std::uint8_t> frame) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) throw TransportError("local transport: peer closed");
    out_->frames.push_back(std::move(frame));
    out_->cv.notify_one();
  }

  std::vector<std::uint8_t> recv() override {
    std::unique_lock lock(in_->mu);
    in_->cv.wait(lock, [&] { return !in_->frames.empty() || in_->closed; });
    if (in_->frames.empty()) throw TransportError("local transport: connection closed");
    auto f = std::move(in_->frames.front());
    in_->frames.pop_front();
    return f;
  }

  void close() override {
    for (auto* q : {in_.get(), out_.get()}) {
      std::lock_guard lock(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<Queue> in_, out_;
};

std::string errno_text() { return std::strerror(errno); }

void write_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransportError("tcp send failed: " + errno_text());
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

void read_all(int fd, std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::recv(fd, data, n, 0);
    if (r == 0) throw TransportError("tcp connection closed by peer");
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError("tcp recv failed: " + errno_text());
    }
    data += r;
    n -= static_cast<std::size_t>(r);
  }
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(host.c_str(), nullptr, &hints, &res); rc != 0 || !res) {
    throw TransportError("cannot resolve host '" + host + "': " + ::gai_strerror(rc));
  }
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof(addr));
  ::freeaddrinfo(res);
  addr.sin_port = htons(port);
  return addr;
}

}  // namespace

std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>> make_local_pair() {
  auto a = std::make_shared<Queue>();
  auto b = std::make_shared<Queue>();
  return {std::make_unique<LocalTransport>(a, b), std::make_unique<LocalTransport>(b, a)};
}

TcpTransport::~TcpTransport() { close(); }

std::unique_ptr<TcpTransport> TcpTransport::connect(const std::string& host, std::uint16_t port, int timeout_ms) {
  const sockaddr_in addr = resolve(host, port);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (true) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed: " + errno_text());
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return std::make_unique<TcpTransport>(fd);
    }
    const std::string err = errno_text();
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw TransportError("cannot connect to " + host + ":" + std::to_string(port) + ": " + err);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

void TcpTransport::send(std::vector<std::uint8_t> frame) {
  if (fd_ < 0) throw TransportError("tcp transport: closed");
  write_all(fd_, frame.data(), frame.size());
}

std::vector<std::uint8_t> TcpTransport::recv() {
  if (fd_ < 0) throw TransportError("tcp transport: closed");
  std::vector<std::uint8_t> frame(kFrameHeaderSize);
  read_all(fd_, frame.data(), kFrameHeaderSize);
  const FrameHeader h = decode_header(frame);
  frame.resize(kFrameHeaderSize + h.payload_len);
  read_all(fd_, frame.data() + kFrameHeaderSize, h.payload_len);
  return frame;
}

void TcpTransport::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  sockaddr_in addr = resolve(host, port);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw TransportError("socket() failed: " + errno_text());
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
    const std::string err = errno_text();
    ::close(fd_);
    throw TransportError("cannot bind " + host + ":" + std::to_string(port) + ": " + err);
  }
  if (::listen(fd_, 1) != 0) {
    const std::string err = errno_text();
    ::close(fd_);
    throw TransportError("listen failed: " + err);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<TcpTransport> TcpListener::accept() {
  while (true) {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd >= 0) {
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return std::make_unique<TcpTransport>(fd);
    }
    if (errno != EINTR) throw TransportError("accept failed: " + errno_text());
  }
}

void Channel::send(const WireMessage& m) {
  std::vector<std::uint8_t> frame = encode_frame(m);
  ledger_.record_frame(outgoing(), frame.size(), cost_class(m), true);
  if (capture_) capture_(outgoing(), frame);
  t_.send(std::move(frame));
}

WireMessage Channel::recv() {
  std::vector<std::uint8_t> frame = t_.recv();
  WireMessage m = decode_frame(frame);
  ledger_.record_frame(incoming(), frame.size(), cost_class(m), false);
  if (capture_) capture_(incoming(), frame);
  return m;
}

}  // namespace dlora
