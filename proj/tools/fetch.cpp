#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "fetch.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>

#include "cli.hpp"
#include "httplib.h"

namespace snf::cli {

int fetch_mnist(const FetchArgs& a, std::ostream& out, std::ostream& err) {
  static const char* kFiles[] = {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
                                 "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"};
  const auto scheme = a.base_url.find("://");
  if (scheme == std::string::npos) throw ConfigError("mirror URL needs a scheme: " + a.base_url);
  const auto path_start = a.base_url.find('/', scheme + 3);
  const std::string host = a.base_url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : a.base_url.substr(path_start);
  if (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  std::filesystem::create_directories(a.out_dir);
  httplib::Client client(host);
  client.set_follow_location(true);
  client.set_read_timeout(120, 0);
  for (const char* name : kFiles) {
    const auto res = client.Get(prefix + "/" + name);
    if (!res || res->status != 200) {
      err << "error: download of " << name << " failed ("
          << (res ? std::to_string(res->status) : httplib::to_string(res.error())) << ")\n";
      return kExitUsage;
    }
    const auto path = std::filesystem::path(a.out_dir) / name;
    std::ofstream f(path, std::ios::binary);
    f.write(res->body.data(), static_cast<std::streamsize>(res->body.size()));
    if (!f) throw ConfigError("cannot write " + path.string());
    out << path.string() << ' ' << res->body.size() << " bytes\n";
  }
  err << "train with --data idx:" << (std::filesystem::path(a.out_dir) / kFiles[0]).string() << '\n';
  return kExitOk;
}

}  // namespace snf::cli
