/* Single range measurement update through the C interface.
 *
 *   cargo build -p bruf-ffi
 *   cc -Icrates/ffi/include crates/ffi/examples/range.c \
 *      target/debug/libbruf_ffi.a -lm -lpthread -ldl -o range
 */
#include <math.h>
#include <stdio.h>

#include "bruf.h"

static int check(enum BrufStatus s, const char *what) {
  if (s != BRUF_STATUS_OK) {
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, bruf_last_error());
    return 1;
  }
  return 0;
}

int main(void) {
  const double mean[2] = {1.0, 0.0};
  const double cov[4] = {0.25, 0.0, 0.0, 0.25};
  const double y[1] = {1.5};
  BrufBelief *prior = NULL, *post = NULL;
  BrufModel *model = NULL;
  size_t steps = 0;
  double m[2];

  if (check(bruf_belief_new(2, mean, cov, &prior), "belief") ||
      check(bruf_model_range_new(0.01, &model), "model") ||
      check(bruf_ec_update(prior, model, y, 1, 1e-3, 1e-3, 25, &post, &steps), "update") ||
      check(bruf_belief_mean(post, m, 2), "mean"))
    return 1;

  printf("bruf %s: mean (%.4f, %.4f), range %.4f, %zu steps\n", bruf_version(), m[0], m[1],
         hypot(m[0], m[1]), steps);

  bruf_belief_free(post);
  bruf_belief_free(prior);
  bruf_model_free(model);
  return 0;
}
