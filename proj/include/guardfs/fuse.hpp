#pragma once

#include <atomic>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "guardfs/session.hpp"

namespace guardfs::fuse {

struct FuseOptions {
  int threads = 16;  // gated calls park a thread each, so keep this generous
  std::uint32_t max_write = 128 * 1024;
  bool allow_other = true;
};

/// True when /dev/fuse can be opened and this process may mount.
bool available();

/// Speaks the kernel FUSE protocol directly on /dev/fuse and turns each
/// request into an overlay dispatch.
class FuseDriver final : public session::CallDriver {
 public:
  explicit FuseDriver(FuseOptions options = {});
  ~FuseDriver() override;

  void start(overlay::Overlay& ov) override;
  void stop() override;

 private:

  void worker();
  void handle(const std::uint8_t* buf, std::size_t len);
  void reply(std::uint64_t unique, int error, const void* data = nullptr, std::size_t size = 0,
             const void* data2 = nullptr, std::size_t size2 = 0);

  std::uint64_t node_for(const std::string& path);
  std::string path_of(std::uint64_t nodeid);
  void rename_nodes(const std::string& from, const std::string& to);
  std::string child(std::uint64_t parent, const char* name);

  FuseOptions options_;
  overlay::Overlay* overlay_ = nullptr;
  std::string root_;
  int fd_ = -1;
  int stop_fd_ = -1;
  bool mounted_ = false;
  std::vector<std::thread> workers_;
  std::atomic<bool> stopping_{false};

  std::mutex nodes_mu_;
  std::uint64_t next_node_ = 2;
  std::unordered_map<std::uint64_t, std::string> paths_;
  std::unordered_map<std::string, std::uint64_t> ids_;
};

}  // namespace guardfs::fuse
