#pragma once

#include <string>

#include <gtest/gtest.h>

#include "common.hpp"
#include "hamobe/error.hpp"

namespace hamobe::test {

template <class F>
void expect_error(F&& f, ErrorKind kind, const std::string& fragment = "") {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(kind) << " error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
    if (!fragment.empty()) EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

}  // namespace hamobe::test
