// Copyright 2026 The dlora-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dlora/cost.hpp"
#include "dlora/protocol.hpp"

namespace dlora {

/// Connection loss or closed peer. Sessions abort; there is no retry.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered, reliable delivery of whole frames in each direction.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(std::vector<std::uint8_t> frame) = 0;
  virtual std::vector<std::uint8_t> recv() = 0;
  virtual void close() = 0;
};

/// Two connected in-process endpoints (first, second).
std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>> make_local_pair();

class TcpTransport : public Transport {
 public:
  explicit TcpTransport(int fd) : fd_(fd) {}
  ~TcpTransport() override;
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  /// Retries the connect until `timeout_ms` elapses (the server may still be starting).
  static std::unique_ptr<TcpTransport> connect(const std::string& host, std::uint16_t port, int timeout_ms = 10000);

  void send(std::vector<std::uint8_t> frame) override;
  std::vector<std::uint8_t> recv() override;
  void close() override;

 private:
  int fd_ = -1;
};

class TcpListener {
 public:
  /// Port 0 picks an ephemeral port; see port().
  TcpListener(const std::string& host, std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  std::unique_ptr<TcpTransport> accept();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

using FrameCapture = std::function<void(Direction, std::span<const std::uint8_t>)>;

/// Message-level endpoint: encodes, decodes, charges the ledger and feeds
/// an optional capture hook with every raw frame.
class Channel {
 public:
  Channel(Transport& transport, CostLedger& ledger, Node self) : t_(transport), ledger_(ledger), self_(self) {}

  void set_capture(FrameCapture capture) { capture_ = std::move(capture); }

  void send(const WireMessage& m);
  WireMessage recv();

  /// Receives and requires a specific message type.
  template <typename M>
  M expect() {
    WireMessage m = recv();
    if (auto* got = std::get_if<M>(&m)) return std::move(*got);
    throw ProtocolError(std::string("unexpected ") + to_string(type_of(m)) + " frame (expected " +
                        to_string(type_of(WireMessage{M{}})) + ")");
  }

  void close() { t_.close(); }

 private:
  Direction outgoing() const { return self_ == Node::Edge ? Direction::ToCloud : Direction::ToEdge; }
  Direction incoming() const { return self_ == Node::Edge ? Direction::ToEdge : Direction::ToCloud; }

  Transport& t_;
  CostLedger& ledger_;
  Node self_;
  FrameCapture capture_;
};

}  // namespace dlora
