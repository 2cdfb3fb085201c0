#include <doctest.h>

#include <fstream>

#include "fastadapt/vocab.hpp"
#include "test_util.hpp"

using namespace fastadapt;

TEST_CASE("reserved ids come first and are never reassigned") {
  Vocabulary v({"a", "b"});
  CHECK(v.id("<bos>") == Vocabulary::bos);
  CHECK(v.id("<eos>") == Vocabulary::eos);
  CHECK(v.id("<pad>") == Vocabulary::pad);
  CHECK(v.id("<unk>") == Vocabulary::unk);
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK_THROWS_AS(v.add("<eos>"), std::invalid_argument);
  CHECK_THROWS_AS(v.add(""), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), std::invalid_argument);
}

TEST_CASE("unknown tokens encode to unk; bad ids throw") {
  Vocabulary v({"x"});
  CHECK(v.encode({"x", "zzz"}) == std::vector<int>{4, Vocabulary::unk});
  CHECK_THROWS_AS(v.token(99), std::out_of_range);
  CHECK_THROWS_AS(v.token(-1), std::out_of_range);
}

TEST_CASE("id and token are mutual inverses") {
  Vocabulary v({"the", "cat", "sat"});
  for (int i = 0; i < static_cast<int>(v.size()); ++i) CHECK(v.id(v.token(i)) == i);
  CHECK(v.decode(v.encode({"cat", "the"})) == std::vector<std::string>{"cat", "the"});
}

TEST_CASE("save/load round trip, CRLF tolerated") {
  testutil::TempDir dir("vocab");
  Vocabulary v({"alpha", "beta", "gamma"});
  v.save(dir / "v.txt");
  Vocabulary back = Vocabulary::load(dir / "v.txt");
  CHECK(back == v);

  {
    std::ofstream out(dir / "crlf.txt", std::ios::binary);
    out << "<bos>\r\n<eos>\r\n<pad>\r\n<unk>\r\nalpha\r\nbeta\r\ngamma\r\n";
  }
  CHECK(Vocabulary::load(dir / "crlf.txt") == v);

  {
    std::ofstream out(dir / "bad.txt");
    out << "alpha\nbeta\n";
  }
  CHECK_THROWS(Vocabulary::load(dir / "bad.txt"));
}
