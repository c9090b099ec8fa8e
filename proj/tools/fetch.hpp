#pragma once

#include <iosfwd>
#include <string>

namespace snf::cli {

struct FetchArgs {
  std::string out_dir = "mnist";
  std::string base_url = "https://ossci-datasets.s3.amazonaws.com/mnist";
};

/// Downloads the four gzip-compressed MNIST IDX files into out_dir.
int fetch_mnist(const FetchArgs& args, std::ostream& out, std::ostream& err);

}  // namespace snf::cli
