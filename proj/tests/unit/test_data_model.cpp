#include "doctest.h"

#include <fstream>

#include "curling/data_model.hpp"
#include "curling/errors.hpp"
#include "curling/synthetic.hpp"
#include "support/scratch.hpp"

namespace curling {
namespace {

using namespace data;
using testing::ScratchDir;

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p) << s;
}

TEST_CASE("tokenize") {
  CHECK(tokenize("Is RED, and-longer!") == std::vector<std::string>{"is", "red", "and", "longer"});
  CHECK(tokenize("  ...  ").empty());
}

TEST_CASE("build_vocab") {
  SUBCASE("empty input gives only the specials") {
    const Vocab v = build_vocab({}, 1);
    REQUIRE(v.size() == 2);
    CHECK(v.token(0) == "<pad>");
    CHECK(v.token(1) == "<unk>");
  }
  SUBCASE("frequency first, then text") {
    const Vocab v = build_vocab({"is red is"}, 1);
    CHECK(v.index("is") == 2);
    CHECK(v.index("red") == 3);
    CHECK(v.size() == 4);
  }
  SUBCASE("threshold drops rare tokens to UNK") {
    const Vocab v = build_vocab({"blue", "blue", "cyan"}, 2);
    CHECK(v.contains("blue"));
    CHECK_FALSE(v.contains("cyan"));
    CHECK(v.index("cyan") == Vocab::kUnk);
  }
  SUBCASE("ties broken alphabetically regardless of input order") {
    CHECK(build_vocab({"zeta alpha mid"}, 1) == build_vocab({"mid", "zeta", "alpha"}, 1));
    CHECK(build_vocab({"zeta alpha mid"}, 1).index("alpha") == 2);
  }
  SUBCASE("min_count below one is a usage error") { CHECK_THROWS_AS(build_vocab({"a"}, 0), UsageError); }
}

TEST_CASE("assemble_query_text") {
  const Vocab v = build_vocab({"is red", "has no sleeves"}, 1);
  SUBCASE("caption one then caption two") {
    const TokenSequence s = assemble_query_text({"x", "y", {"is red", "has no sleeves"}, "dress"}, v, 8);
    CHECK(s.length == 5);
    const std::vector<int> want = {v.index("is"), v.index("red"), v.index("has"), v.index("no"),
                                   v.index("sleeves"), 0, 0, 0};
    CHECK(s.ids == want);
  }
  SUBCASE("empty first caption leaves the second") {
    const TokenSequence s = assemble_query_text({"x", "y", {"", "is red"}, "dress"}, v, 4);
    CHECK(s.length == 2);
    CHECK(s.ids == std::vector<int>{v.index("is"), v.index("red"), 0, 0});
  }
  SUBCASE("unknown words map to UNK") {
    const TokenSequence s = assemble_query_text({"x", "y", {"is purple", "no"}, "dress"}, v, 4);
    CHECK(s.ids[1] == 1);
  }
  SUBCASE("truncated to max_len with the true length kept") {
    const TokenSequence s = assemble_query_text({"x", "y", {"is red is red", "is red"}, "dress"}, v, 3);
    CHECK(s.ids.size() == 3);
    CHECK(s.length == 3);
  }
  SUBCASE("both empty is a data error") {
    CHECK_THROWS_AS(assemble_query_text({"x", "y", {"", "?!"}, "dress"}, v), DataError);
  }
}

TEST_CASE("load and save") {
  ScratchDir dir("data");
  const DatasetBundle b = testing::tiny_bundle();

  SUBCASE("round trip is field by field identical") {
    save_dataset(b, dir.path());
    const DatasetBundle back = load_dataset(dir.path(), "dress", Split::kTrain);
    CHECK(back == b);
    save_dataset(back, dir / "again");
    CHECK(load_dataset(dir / "again", "dress", Split::kTrain) == b);
  }
  SUBCASE("records come back sorted by id") {
    DatasetBundle shuffled = b;
    std::swap(shuffled.records[0], shuffled.records[3]);
    save_dataset(shuffled, dir.path());
    CHECK(load_dataset(dir.path(), "dress", Split::kTrain).records == b.records);
  }
  SUBCASE("empty corpus loads with specials-only vocab") {
    DatasetBundle empty;
    empty.category = "shirt";
    empty.split = Split::kVal;
    empty.attribute_categories = {"color"};
    save_dataset(empty, dir.path());
    const DatasetBundle back = load_dataset(dir.path(), "shirt", Split::kVal);
    CHECK(back.records.empty());
    CHECK(back.triplets.empty());
    CHECK(back.vocab.size() == 2);
  }
  SUBCASE("missing file is a load error") {
    CHECK_THROWS_AS(load_dataset(dir.path(), "dress", Split::kTrain), LoadError);
  }
  SUBCASE("dangling triplet id names the id") {
    DatasetBundle bad = b;
    bad.triplets[0].target_id = "ghost";
    save_dataset(bad, dir.path());
    try {
      load_dataset(dir.path(), "dress", Split::kTrain);
      FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
      CHECK(std::string(e.what()).find("ghost") != std::string::npos);
    }
  }
  SUBCASE("configured d_img mismatch is a schema error") {
    save_dataset(b, dir.path());
    LoadConfig cfg;
    cfg.d_img = 4;
    CHECK_THROWS_AS(load_dataset(dir.path(), "dress", Split::kTrain, cfg), SchemaError);
  }
  SUBCASE("caption empty after tokenization is a data error") {
    DatasetBundle bad = b;
    bad.triplets[1].captions[0] = "--";
    save_dataset(bad, dir.path());
    CHECK_THROWS_AS(load_dataset(dir.path(), "dress", Split::kTrain), DataError);
  }
  SUBCASE("too many attribute tokens is a schema error") {
    save_dataset(b, dir.path());
    LoadConfig cfg;
    cfg.max_attrs = 1;
    CHECK_THROWS_AS(load_dataset(dir.path(), "dress", Split::kTrain, cfg), SchemaError);
  }
}

TEST_CASE("synthetic corpus") {
  synthetic::CorpusSpec spec;
  spec.d_img = 5;
  const DatasetBundle a = synthetic::make_corpus(spec);
  CHECK(a.records.size() == 16);
  CHECK(a.triplets.size() == 8);
  CHECK(a == synthetic::make_corpus(spec));
  for (std::size_t i = 0; i < a.triplets.size(); ++i) {
    CHECK(a.triplets[i].source_id == a.records[2 * i].id);
    CHECK(a.triplets[i].target_id == a.records[2 * i + 1].id);
  }
  ScratchDir dir("synth");
  save_dataset(a, dir.path());
  CHECK(load_dataset(dir.path(), "dress", Split::kTrain) == a);
}

TEST_CASE("import_fashioniq") {
  ScratchDir src("fiq-src"), dst("fiq-dst");
  write_text(src / "image_splits/split.dress.train.json", R"(["p2", "p1", "p3"])");
  write_text(src / "features/dress.train.txt", "p1 1 2\np2 3 4\np3 5 6\n");
  write_text(src / "captions/cap.dress.train.json",
             R"([{"candidate": "p1", "target": "p2", "captions": ["is Longer", "has dots"]},
                 {"candidate": "p1", "target": "zz", "captions": ["a", "b"]},
                 {"candidate": "p3", "target": "p3", "captions": ["a", "b"]}])");
  write_text(src / "tags/asin2attr.dress.train.json", R"({"p2": [["dotted"], [], ["a-line"]]})");

  const ImportSummary s = import_fashioniq(src.path(), dst.path());
  CHECK(s.images == 3);
  CHECK(s.triplets == 1);
  CHECK(s.skipped_triplets == 2);

  const DatasetBundle b = load_dataset(dst.path(), "dress", Split::kTrain);
  REQUIRE(b.records.size() == 3);
  CHECK(b.records[0].id == "p1");
  CHECK(b.records[1].backbone_feature == std::vector<float>{3, 4});
  CHECK(b.records[1].attributes.at("texture") == std::vector<std::string>{"dotted"});
  CHECK(b.records[1].attributes.at("shape") == std::vector<std::string>{"a-line"});
  CHECK(b.records[1].attributes.count("fabric") == 0);
  CHECK(b.triplets.size() == 1);

  CHECK_THROWS_AS(import_fashioniq(dst / "nowhere", dst / "out"), LoadError);
}

}  // namespace
}  // namespace curling
